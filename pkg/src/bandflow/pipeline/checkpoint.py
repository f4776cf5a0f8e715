"""Self-contained checkpoint files.

Layout::

    b"BFCKPT\\0\\0" | u32 format version | u64 header length | header JSON
    | raw little-endian array payload | SHA-256 of everything before it

The header is UTF-8 JSON with sorted keys and lists every array's name,
dtype, shape and byte offset, so a load followed by a save reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import BackboneConfig
from ..equalizer import PQMFBank, RunningStats
from ..errors import IncompatibleCheckpointError, IntegrityError
from ..flow import StraightnessProfile, TimeGrid
from ..model import Vocoder
from ..spectral import SpectralConfig
from ..subband import SubbandLayout

MAGIC = b"BFCKPT\0\0"
FORMAT_VERSION = 1
_DIGEST = 32
_PREFIX = struct.Struct("<IQ")


@dataclass
class CheckpointBundle:
    model: Vocoder
    step: int = 0
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # JSON-safe metadata (config text, losses)
    train_arrays: dict = field(default_factory=dict)  # name -> np.ndarray (optimizer, RNG state)


def _tensor_to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def _stats_meta(stats: RunningStats) -> dict:
    return {"size": stats.size, "ema_decay": stats.ema_decay, "var_floor": stats.var_floor,
            "update_count": stats.update_count, "initialized": stats.initialized}


def _model_records(model: Vocoder) -> tuple[dict, dict]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.backbone.state_dict().items():
        arrays[f"backbone/{name}"] = _tensor_to_numpy(tensor)
    if model.stats.initialized:
        arrays["stats/mean"] = model.stats.mean
        arrays["stats/var"] = model.stats.var
    meta = {
        "domain": model.domain,
        "spectral": asdict(model.spectral),
        "layout": {"d": model.layout.d, "n_sb": model.layout.n_sb, "d_ol": model.layout.d_ol},
        "backbone": {**asdict(model.backbone.cfg), "bandwidth_codebooks": list(model.backbone.cfg.bandwidth_codebooks)},
        "stats": _stats_meta(model.stats),
        "pqmf": None,
        "straightness": model.straightness is not None,
        "time_grid": model.time_grid is not None,
    }
    if model.bank is not None:
        b = model.bank
        meta["pqmf"] = {"n_bands": b.n_bands, "taps": b.taps, "cutoff_ratio": b.cutoff_ratio, "beta": b.beta}
        arrays["pqmf/analysis"] = b.analysis_filters
        arrays["pqmf/synthesis"] = b.synthesis_filters
    if model.straightness is not None:
        p = model.straightness
        arrays["straightness/probe_times"] = p.probe_times
        arrays["straightness/deviation"] = p.deviation
        arrays["straightness/cumulative"] = p.cumulative
    if model.time_grid is not None:
        arrays["time_grid"] = model.time_grid.points
    return meta, arrays


def _model_from_records(meta: dict, arrays: dict) -> Vocoder:
    spectral_cfg = SpectralConfig(**meta["spectral"])
    layout = SubbandLayout(**meta["layout"])
    bb = BackboneConfig(**{**meta["backbone"], "bandwidth_codebooks": tuple(meta["backbone"]["bandwidth_codebooks"])})
    bank = None
    if meta["pqmf"] is not None:
        bank = PQMFBank(**meta["pqmf"], analysis_filters=arrays["pqmf/analysis"].copy(),
                        synthesis_filters=arrays["pqmf/synthesis"].copy())
    sm = meta["stats"]
    stats = RunningStats(sm["size"], sm["ema_decay"], sm["var_floor"],
                         arrays["stats/mean"].copy() if sm["initialized"] else None,
                         arrays["stats/var"].copy() if sm["initialized"] else None,
                         sm["update_count"])
    model = Vocoder(meta["domain"], spectral_cfg, layout, bb, bank, stats)
    state = {k[len("backbone/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("backbone/")}
    first = next(iter(state.values()))
    model.backbone.to(first.dtype)
    model.backbone.load_state_dict(state, strict=True)
    if meta["straightness"]:
        model.straightness = StraightnessProfile(arrays["straightness/probe_times"].copy(),
                                                 arrays["straightness/deviation"].copy(),
                                                 arrays["straightness/cumulative"].copy())
    if meta["time_grid"]:
        model.time_grid = TimeGrid(arrays["time_grid"].copy())
    return model


def encode(bundle: CheckpointBundle) -> bytes:
    model_meta, arrays = _model_records(bundle.model)
    for name, arr in bundle.train_arrays.items():
        arrays[f"train/{name}"] = np.asarray(arr)
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"model": model_meta, "step": int(bundle.step), "seeds": bundle.seeds, "extra": bundle.extra,
              "arrays": index}
    header_raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(header_raw)) + header_raw + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes) -> CheckpointBundle:
    if len(raw) < len(MAGIC) + _PREFIX.size + _DIGEST or raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint digest mismatch; the file is truncated or corrupted")
    version, header_len = _PREFIX.unpack_from(body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = len(MAGIC) + _PREFIX.size
    header = json.loads(body[start:start + header_len].decode("utf-8"))
    payload = memoryview(body)[start + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    model = _model_from_records(header["model"], arrays)
    train = {k[len("train/"):]: v for k, v in arrays.items() if k.startswith("train/")}
    return CheckpointBundle(model, header["step"], header["seeds"], header["extra"], train)


def save_checkpoint(bundle: CheckpointBundle, path: str | Path) -> None:
    """Atomic write: a crash mid-save leaves any previous file intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(bundle)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    return decode(Path(path).read_bytes())
