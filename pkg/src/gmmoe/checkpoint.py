"""Self-describing binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, raw little-endian array payload, 32-byte sha256 trailer over all
preceding bytes. A small JSON sidecar next to the container carries the
format version, model config, training iteration and rng state digest so
tooling can inspect checkpoints without parsing the binary.

Every malformed-file condition (missing, truncated, wrong magic or
version, corrupted payload) raises CheckpointError on load.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CheckpointError
from .network import GMMoENet, ModelConfig

MAGIC = b"GMMOEBIN"
FORMAT_VERSION = 1

_TORCH_TO_NP = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
}
_NP_TO_TORCH = {
    "<f4": torch.float32,
    "<f8": torch.float64,
    "<i8": torch.int64,
    "<i4": torch.int32,
    "|u1": torch.uint8,
}


def _tensor_bytes(t: torch.Tensor):
    dt = _TORCH_TO_NP.get(t.dtype)
    if dt is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy().astype(np.dtype(dt), copy=False)
    return dt, list(t.shape), arr.tobytes()


def _bytes_tensor(raw: bytes, dtype: str, shape) -> torch.Tensor:
    if dtype not in _NP_TO_TORCH:
        raise CheckpointError(f"unsupported array dtype {dtype!r}")
    arr = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape)
    return torch.from_numpy(arr.copy()).to(_NP_TO_TORCH[dtype])


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path: str) -> str:
    root, ext = os.path.splitext(path)
    return (root if ext == ".bin" else path) + ".json"


def rng_state_digest(sampler_state) -> str:
    """sha256 over the serialized sampler generator state (empty bytes when
    the checkpoint was saved outside a training run)."""
    if sampler_state is None:
        raw = b""
    else:
        raw = _tensor_bytes(sampler_state)[2]
    return hashlib.sha256(raw).hexdigest()


@dataclass
class CheckpointBundle:
    """Everything load_checkpoint recovers from disk."""

    model_config: ModelConfig
    iteration: int
    model_state: dict
    optimizer_hyperparams: dict = None
    optimizer_state: dict = None
    sampler_state: torch.Tensor = None
    extra: dict = field(default_factory=dict)


def _optimizer_payload(optimizer, param_names):
    """Flatten Adam state into name-keyed arrays plus scalar steps."""
    sd = optimizer.state_dict()
    groups = sd["param_groups"]
    if len(groups) != 1:
        raise CheckpointError("expected a single optimizer param group")
    g = groups[0]
    hyper = {
        "lr": g["lr"],
        "betas": list(g["betas"]),
        "eps": g["eps"],
        "weight_decay": g["weight_decay"],
    }
    idx_to_name = {idx: param_names[pos] for pos, idx in enumerate(g["params"])}
    arrays = {}
    steps = {}
    for idx, st in sd["state"].items():
        name = idx_to_name[idx]
        step = st["step"]
        steps[name] = float(step.item() if torch.is_tensor(step) else step)
        arrays[f"optim.{name}.exp_avg"] = st["exp_avg"]
        arrays[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
    return hyper, steps, arrays


def save_checkpoint(path, model, *, iteration=0, optimizer=None,
                    sampler_state=None, extra=None) -> str:
    """Write the container and its sidecar atomically; returns `path`.

    `sampler_state` is the training sampler's generator state tensor;
    `extra` must be a JSON-serializable dict.
    """
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    opt_hyper, opt_steps = None, None
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        opt_hyper, opt_steps, opt_arrays = _optimizer_payload(optimizer, names)
        arrays.update(opt_arrays)
    if sampler_state is not None:
        arrays["rng.sampler"] = sampler_state

    index = []
    payload = bytearray()
    for name in sorted(arrays):
        dt, shape, raw = _tensor_bytes(arrays[name])
        index.append({"name": name, "dtype": dt, "shape": shape,
                      "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)

    digest = rng_state_digest(sampler_state)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "iteration": int(iteration),
        "arrays": index,
        "optimizer": None if opt_hyper is None else
            {"type": "adam", "hyperparams": opt_hyper, "steps": opt_steps},
        "rng_state_digest": digest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()

    blob = bytearray()
    blob += MAGIC
    blob += FORMAT_VERSION.to_bytes(4, "little")
    blob += len(hbytes).to_bytes(8, "little")
    blob += hbytes
    blob += payload
    blob += hashlib.sha256(bytes(blob)).digest()
    _atomic_write(path, bytes(blob))

    sidecar = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_iteration": int(iteration),
        "rng_state_digest": digest,
    }
    for key in ("train_config", "config_digest"):
        if extra and key in extra:
            sidecar[key] = extra[key]
    _atomic_write(sidecar_path(path), json.dumps(sidecar, indent=2).encode())
    return path


def load_checkpoint(path) -> CheckpointBundle:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 4 + 8 + 32:
        raise CheckpointError(f"checkpoint truncated: {path} ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version = int.from_bytes(blob[8:12], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )
    stored = blob[-32:]
    if hashlib.sha256(blob[:-32]).digest() != stored:
        raise CheckpointError(f"checkpoint digest mismatch (corrupt or truncated): {path}")

    hlen = int.from_bytes(blob[12:20], "little")
    hstart, hend = 20, 20 + hlen
    if hend > len(blob) - 32:
        raise CheckpointError(f"checkpoint header overruns file: {path}")
    try:
        header = json.loads(blob[hstart:hend].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header in {path}: {e}") from e

    payload = blob[hend:-32]
    tensors = {}
    for entry in header["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(
                f"array {entry['name']!r} overruns checkpoint payload: {path}"
            )
        tensors[entry["name"]] = _bytes_tensor(
            payload[lo:hi], entry["dtype"], entry["shape"]
        )

    sampler_state = tensors.get("rng.sampler")
    if rng_state_digest(sampler_state) != header["rng_state_digest"]:
        raise CheckpointError(f"rng state digest mismatch in {path}")

    model_state = {
        k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")
    }
    opt = header.get("optimizer")
    opt_hyper, opt_state = None, None
    if opt is not None:
        opt_hyper = opt["hyperparams"]
        opt_state = {}
        for name, step in opt["steps"].items():
            opt_state[name] = {
                "step": step,
                "exp_avg": tensors[f"optim.{name}.exp_avg"],
                "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"],
            }
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except Exception as e:
        raise CheckpointError(f"invalid model config in {path}: {e}") from e
    return CheckpointBundle(
        model_config=config,
        iteration=int(header["iteration"]),
        model_state=model_state,
        optimizer_hyperparams=opt_hyper,
        optimizer_state=opt_state,
        sampler_state=sampler_state,
        extra=header.get("extra", {}),
    )


def restore_model(bundle: CheckpointBundle) -> GMMoENet:
    model = GMMoENet(bundle.model_config)
    missing, unexpected = model.load_state_dict(bundle.model_state, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match model: missing={sorted(missing)} "
            f"unexpected={sorted(unexpected)}"
        )
    return model


def restore_optimizer(bundle: CheckpointBundle, model, optimizer) -> None:
    """Load saved Adam moments into a freshly constructed optimizer."""
    if bundle.optimizer_state is None:
        raise CheckpointError("checkpoint holds no optimizer state")
    sd = optimizer.state_dict()
    names = [n for n, _ in model.named_parameters()]
    name_to_idx = {name: idx for idx, name in
                   zip(sd["param_groups"][0]["params"], names)}
    state = {}
    for name, st in bundle.optimizer_state.items():
        if name not in name_to_idx:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        state[name_to_idx[name]] = {
            "step": torch.tensor(float(st["step"])),
            "exp_avg": st["exp_avg"],
            "exp_avg_sq": st["exp_avg_sq"],
        }
    sd["state"] = state
    h = bundle.optimizer_hyperparams
    g = sd["param_groups"][0]
    g["lr"] = h["lr"]
    g["betas"] = tuple(h["betas"])
    g["eps"] = h["eps"]
    g["weight_decay"] = h["weight_decay"]
    optimizer.load_state_dict(sd)
