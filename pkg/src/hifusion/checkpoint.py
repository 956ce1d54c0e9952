"""Weight checkpoint archive: one zip holding manifest.json + weights/*.npy.

The manifest records the architecture identity (config snapshot, width,
stage schedules, creation seed, code version) and the gene names the model
predicts. Neither the manifest nor the zip entries carry timestamps, so
saving the same model twice yields byte-identical archives and reruns are
comparable by content hash.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ModelConfig, TrainConfig, config_to_dict, configs_from_dict

MANIFEST_NAME = "manifest.json"
WEIGHTS_DIR = "weights/"


def _stage_schedule(encoder_config) -> dict:
    return {
        "depth": encoder_config.depth,
        "base_width": encoder_config.base_width,
        "stem_stride": encoder_config.stem_stride,
        "stem_pool": encoder_config.stem_pool,
        "stage_strides": list(encoder_config.stage_strides),
        "blocks_per_stage": encoder_config.blocks_per_stage,
    }


def save_checkpoint(
    path,
    model,
    train_config: TrainConfig,
    gene_names: list[str],
    seed: int,
) -> None:
    manifest = {
        "architecture": "hifusion",
        "code_version": __version__,
        "d": model.config.d,
        "stage_schedule": {
            "spot": _stage_schedule(model.config.spot_encoder),
            "region": _stage_schedule(model.config.region_encoder),
        },
        "seed": seed,
        "gene_names": list(gene_names),
        "config": config_to_dict(model.config, train_config),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    entries = [(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True).encode())]
    for key in sorted(arrays):
        buf = io.BytesIO()
        np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
        entries.append((WEIGHTS_DIR + key + ".npy", buf.getvalue()))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        # fixed entry timestamps keep a rerun's archive byte-identical
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (manifest, state_dict of torch tensors)."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST_NAME))
        state = {}
        for name in zf.namelist():
            if name.startswith(WEIGHTS_DIR) and name.endswith(".npy"):
                key = name[len(WEIGHTS_DIR):-len(".npy")]
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                state[key] = torch.from_numpy(arr)
    return manifest, state


def restore_model(path):
    """Rebuild the model named by the checkpoint manifest and load weights."""
    from .model import HiFusion

    manifest, state = load_checkpoint(path)
    model_config, train_config = configs_from_dict(manifest["config"])
    model = HiFusion(model_config)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, manifest, train_config
