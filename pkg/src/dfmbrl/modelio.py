"""Model persistence: self-describing JSON files.

The file carries the kernel tree, the hyperparameter vector embedded in it,
the noise variance and a snapshot of the training data. Floats are written
with shortest-roundtrip representation, so the parameter vector survives a
save/load cycle bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

from .gp import GpModel
from .kernels import kernel_from_dict

FORMAT = "dfmbrl-gp-v1"


def save_model(model: GpModel, path, meta: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "kernel": model.kernel.to_dict(),
        "log_noise_var": model.log_noise_var,
        "inputs": model.X.tolist(),
        "targets": model.y.tolist(),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_model(path) -> tuple[GpModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r} in {path}")
    kernel = kernel_from_dict(doc["kernel"])
    model = GpModel(doc["inputs"], doc["targets"], kernel, doc["log_noise_var"])
    return model, doc.get("meta", {})
