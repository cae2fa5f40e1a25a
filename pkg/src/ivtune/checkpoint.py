"""Model + optimiser checkpoints stored as IVTN containers.

Entry names: ``param/<name>``, ``buffer/<name>/running_mean|running_var``,
``optim/<key>`` and ``meta/json`` (the UTF-8 bytes of a JSON document holding
the model config, trainable names and optimiser hyper-parameters, stored one
byte per float64 element because the container only carries float tensors).
"""

from __future__ import annotations

import json

import numpy as np

from .backbone import ModelConfig
from .container import load_container, save_container
from .model import IVModel
from .training import Optimizer


class CheckpointMismatch(ValueError):
    """Checkpoint contents do not fit the requested architecture."""


def _encode_json(obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _decode_json(arr):
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


def checkpoint_entries(model, optimizer=None):
    entries = {}
    for name, p in model.named_parameters():
        entries[f"param/{name}"] = p.data
    for name, state in model.named_buffers():
        entries[f"buffer/{name}/running_mean"] = state.running_mean
        entries[f"buffer/{name}/running_var"] = state.running_var
    meta = {
        "config": model.config.to_dict(),
        "trainable": [n for n, p in model.named_parameters() if p.trainable],
        "optimizer": optimizer.hyperparams() if optimizer is not None else None,
    }
    if optimizer is not None:
        for key, arr in optimizer.state_dict().items():
            entries[f"optim/{key}"] = arr
    entries["meta/json"] = _encode_json(meta)
    return entries


def save_checkpoint(path, model, optimizer=None):
    save_container(path, checkpoint_entries(model, optimizer))


def load_checkpoint(path, expected_config=None):
    """Rebuild ``(model, optimizer or None)`` from a checkpoint file.

    Raises :class:`CheckpointMismatch` (before touching any model state) if the
    stored config differs from ``expected_config`` or the stored tensors do
    not match the architecture the config describes.
    """
    entries = load_container(path)
    if "meta/json" not in entries:
        raise CheckpointMismatch("checkpoint has no metadata entry")
    meta = _decode_json(entries["meta/json"])
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config != config:
        raise CheckpointMismatch(f"checkpoint config {config} != expected {expected_config}")
    model = IVModel(config)
    _restore(model, entries, meta)
    optimizer = None
    if meta.get("optimizer") is not None:
        hp = meta["optimizer"]
        optimizer = Optimizer(model.parameters(), hp["kind"], hp["lr"], hp["weight_decay"],
                              tuple(hp["betas"]), hp["eps"])
        optimizer.load_state_dict({k[len("optim/"):]: v for k, v in entries.items()
                                   if k.startswith("optim/")})
    return model, optimizer


def load_into(model, path):
    """Load a checkpoint into an existing model; all-or-nothing."""
    entries = load_container(path)
    meta = _decode_json(entries["meta/json"])
    if ModelConfig.from_dict(meta["config"]) != model.config:
        raise CheckpointMismatch("checkpoint config does not match the model")
    _restore(model, entries, meta)
    return model


def _restore(model, entries, meta):
    params = dict(model.named_parameters())
    stored = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))[:3]
        extra = sorted(set(stored) - set(params))[:3]
        raise CheckpointMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if stored[name].shape != p.shape or stored[name].dtype != p.dtype:
            raise CheckpointMismatch(f"{name}: stored {stored[name].shape}/{stored[name].dtype}"
                                     f" vs model {p.shape}/{p.dtype}")
    buffers = dict(model.named_buffers())
    for name in buffers:
        for stat in ("running_mean", "running_var"):
            if f"buffer/{name}/{stat}" not in entries:
                raise CheckpointMismatch(f"missing buffer {name}/{stat}")
    # validation done; now mutate
    trainable = set(meta.get("trainable", []))
    for name, p in params.items():
        p.data = np.array(stored[name])
        p.trainable = name in trainable
    for name, state in buffers.items():
        state.running_mean = np.array(entries[f"buffer/{name}/running_mean"])
        state.running_var = np.array(entries[f"buffer/{name}/running_var"])
