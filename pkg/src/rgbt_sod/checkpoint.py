"""Checkpoint container.

Checkpoints are safetensors files (length-prefixed JSON header followed by raw
little-endian tensor data). Tensor name prefixes:

    model/<state_dict key>                  parameters and buffers
    optim/<parameter name>/momentum_buffer  SGD momentum
    rng/torch                               torch CPU generator state

The header's ``__metadata__`` has a single ``manifest`` entry, a JSON object
with string values ``format``, ``config`` (JSON of the flat training
configuration), ``fingerprint``, ``backbone_id``, ``epoch`` and ``step``. One
key keeps the header bytes stable, since safetensors does not preserve the
order of metadata entries.
"""
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from .errors import WeightLoadError

FORMAT = "rgbt_sod.checkpoint.v1"


def config_fingerprint(flat_config):
    blob = json.dumps(flat_config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict

    @property
    def config(self):
        return json.loads(self.metadata["config"])

    @property
    def epoch(self):
        return int(self.metadata["epoch"])

    @property
    def step(self):
        return int(self.metadata["step"])

    def model_state(self):
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def momentum_buffers(self):
        out = {}
        for k, v in self.tensors.items():
            if k.startswith("optim/") and k.endswith("/momentum_buffer"):
                out[k[len("optim/"):-len("/momentum_buffer")]] = v
        return out

    def save(self, path):
        save_file(self.tensors, str(path), metadata={"manifest": json.dumps(self.metadata, sort_keys=True)})
        return Path(path)


def capture(model, optimizer, flat_config, epoch, step):
    tensors = {f"model/{k}": v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    tensors[f"optim/{names[id(p)]}/momentum_buffer"] = buf.detach().clone().contiguous()
    tensors["rng/torch"] = torch.get_rng_state().clone()
    metadata = {
        "format": FORMAT,
        "config": json.dumps(flat_config, sort_keys=True),
        "fingerprint": config_fingerprint(flat_config),
        "backbone_id": str(flat_config.get("backbone", "")),
        "epoch": str(int(epoch)),
        "step": str(int(step)),
    }
    return Checkpoint(tensors, metadata)


def save_checkpoint(path, model, optimizer, flat_config, epoch, step):
    return capture(model, optimizer, flat_config, epoch, step).save(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise WeightLoadError(f"checkpoint not found: {path}")
    try:
        tensors = {}
        with safe_open(str(path), framework="pt") as fh:
            header = fh.metadata() or {}
            for k in fh.keys():
                tensors[k] = fh.get_tensor(k)
        metadata = json.loads(header.get("manifest", "{}"))
    except (SafetensorError, OSError, ValueError) as exc:
        raise WeightLoadError(f"cannot parse checkpoint {path}: {exc}") from exc
    if metadata.get("format") != FORMAT:
        raise WeightLoadError(f"{path}: not a {FORMAT} file")
    return Checkpoint(tensors, metadata)


def restore(checkpoint, model, optimizer=None, restore_rng=False):
    model.load_state_dict(checkpoint.model_state())
    if optimizer is not None:
        params = dict(model.named_parameters())
        for name, buf in checkpoint.momentum_buffers().items():
            optimizer.state[params[name]]["momentum_buffer"] = buf.clone()
    if restore_rng and "rng/torch" in checkpoint.tensors:
        torch.set_rng_state(checkpoint.tensors["rng/torch"])
