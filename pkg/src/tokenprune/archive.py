"""Model archives: JSON manifests with full-precision decimal parameters.

Floats are serialized through Python's shortest-roundtrip repr (what the
json module emits), so load(save(x)) reproduces every parameter bit for bit
and re-saving a loaded archive is byte-identical. Archives carry the model
config, parameters, optional mask/multiplier state, training metadata and a
checksum of the parameter payload.
"""

from __future__ import annotations

import numpy as np

from . import __version__ as _pkg_version
from .encoder import EncoderParams, ModelConfig
from .errors import DataError
from .fileio import dumps_canonical, read_json, sha256_text, write_json
from .flopsmodel import LagrangeState
from .masks import MaskSet
from .tensor import Tensor

ARCHIVE_FORMAT_VERSION = 1


def _arrays_to_lists(arrays: dict) -> dict:
    return {name: np.asarray(a, dtype=np.float64).tolist() for name, a in arrays.items()}


def params_checksum(params: EncoderParams) -> str:
    return sha256_text(dumps_canonical(_arrays_to_lists(params.state_arrays())))


def save_model_archive(
    path: str,
    params: EncoderParams,
    masks: MaskSet | None = None,
    lagrange: LagrangeState | None = None,
    metadata: dict | None = None,
) -> str:
    doc = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "produced_by": f"tokenprune {_pkg_version}",
        "model_config": params.cfg.to_dict(),
        "params": _arrays_to_lists(params.state_arrays()),
        "params_sha256": params_checksum(params),
        "metadata": metadata or {},
    }
    if masks is not None:
        doc["masks"] = {
            "num_layers": masks.num_layers,
            "n_max": masks.n_max,
            "values": _arrays_to_lists(masks.state_arrays()),
        }
    if lagrange is not None:
        doc["lagrange"] = {"lambda1": lagrange.lambda1.item(), "lambda2": lagrange.lambda2.item()}
    write_json(path, doc)
    return doc["params_sha256"]


class ModelBundle:
    def __init__(self, params: EncoderParams, masks: MaskSet | None, lagrange: LagrangeState | None, metadata: dict, checksum: str):
        self.params = params
        self.masks = masks
        self.lagrange = lagrange
        self.metadata = metadata
        self.checksum = checksum

    @property
    def cfg(self) -> ModelConfig:
        return self.params.cfg


def load_model_archive(path: str) -> ModelBundle:
    doc = read_json(path)
    if doc.get("format_version") != ARCHIVE_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported archive format {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["model_config"])
    tensors = {
        name: Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
        for name, arr in doc["params"].items()
    }
    params = EncoderParams(cfg, tensors)
    expected = doc.get("params_sha256")
    actual = params_checksum(params)
    if expected and expected != actual:
        raise DataError(f"{path}: parameter checksum mismatch")
    masks = None
    if "masks" in doc:
        m = doc["masks"]
        vals = m["values"]
        masks = MaskSet(
            int(m["num_layers"]),
            int(m["n_max"]),
            gate_log_alpha=[np.asarray(vals[f"gate.{i}"], dtype=np.float64) for i in range(int(m["num_layers"]))],
            rank_log_alpha=[np.asarray(vals[f"rank.{i}"], dtype=np.float64) for i in range(int(m["num_layers"]))],
        )
    lagrange = None
    if "lagrange" in doc:
        lagrange = LagrangeState(doc["lagrange"]["lambda1"], doc["lagrange"]["lambda2"])
    return ModelBundle(params, masks, lagrange, doc.get("metadata", {}), actual)
