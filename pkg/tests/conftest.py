import os

from hypothesis import HealthCheck, settings

# CPU-only CI box: per-example deadlines misfire on first-import torch costs.
settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
