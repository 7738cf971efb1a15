"""Self-describing binary checkpoints.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON
header, then one contiguous little-endian payload of raw tensor bytes.
The header carries the config, bookkeeping metadata, a tensor index
(block, name, dtype, shape, offset) and a SHA-256 digest of the payload,
so truncation and corruption are detected before anything is loaded and
a checkpoint can be inspected without torch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import REAL_DTYPE, Config
from .errors import CheckpointFormatError, CheckpointIntegrityError, FileAccessError
from .quantizer import Codebook

MAGIC = b"SEMCKPT1"
FORMAT_VERSION = 1

_DTYPES = {
    "float64": np.float64,
    "float32": np.float32,
    "int64": np.int64,
    "uint8": np.uint8,
}


def write_container(
    path: str | Path, config: Config, blocks: dict[str, dict[str, np.ndarray]], meta: dict
) -> None:
    index = []
    chunks = []
    offset = 0
    for block, tensors in blocks.items():
        for name, arr in tensors.items():
            # np.ascontiguousarray would promote 0-d scalars to shape (1,)
            # and break the optimizer state round trip
            arr = np.asarray(arr)
            if arr.dtype.name not in _DTYPES:
                raise CheckpointFormatError(f"{block}/{name}: unsupported dtype {arr.dtype}")
            raw = arr.astype(arr.dtype.newbyteorder("<"), order="C").tobytes()
            index.append(
                {
                    "block": block,
                    "name": name,
                    "dtype": arr.dtype.name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    config_dict = config.to_dict()
    config_json = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    header = {
        "format_version": FORMAT_VERSION,
        "config": config_dict,
        "config_sha256": hashlib.sha256(config_json).hexdigest(),
        "meta": meta,
        "tensors": index,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(payload)


@dataclass
class Container:
    config: Config
    blocks: dict[str, dict[str, np.ndarray]]
    meta: dict


def read_container(path: str | Path) -> Container:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileAccessError(f"{path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    hlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {header.get('format_version')} unsupported"
        )
    payload = raw[start + hlen :]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointIntegrityError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload digest mismatch")
    blocks: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(
            payload,
            dtype=np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<"),
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        ).reshape(entry["shape"]).astype(_DTYPES[entry["dtype"]])
        blocks.setdefault(entry["block"], {})[entry["name"]] = arr
    try:
        config = Config.from_dict(header["config"])
    except Exception as exc:
        raise CheckpointFormatError(f"{path}: bad stored config: {exc}") from exc
    return Container(config=config, blocks=blocks, meta=header["meta"])


# ---------------------------------------------------------------------------
# state <-> container


def _module_block(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().contiguous().numpy() for k, v in module.state_dict().items()}


def _load_module(module: torch.nn.Module, block: dict[str, np.ndarray], label: str) -> None:
    expected = module.state_dict()
    missing = set(expected) - set(block)
    surplus = set(block) - set(expected)
    if missing or surplus:
        raise CheckpointFormatError(
            f"{label}: tensor names do not match the model "
            f"(missing {sorted(missing)[:3]}, surplus {sorted(surplus)[:3]})"
        )
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in block.items()})


def _optimizer_block(opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], list]:
    sd = opt.state_dict()
    block = {}
    for idx, entry in sd["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                block[f"param{idx}.{key}"] = value.detach().to(torch.float64).numpy()
            else:
                block[f"param{idx}.{key}"] = np.array(float(value), dtype=np.float64)
    groups = []
    for g in sd["param_groups"]:
        groups.append({k: v for k, v in g.items()})
    return block, groups


def _load_optimizer(
    opt: torch.optim.Optimizer, block: dict[str, np.ndarray], groups: list
) -> None:
    state: dict[int, dict] = {}
    for name, arr in block.items():
        pidx, key = name.split(".", 1)
        idx = int(pidx[len("param") :])
        entry = state.setdefault(idx, {})
        if key == "step":
            entry[key] = torch.tensor(float(arr), dtype=torch.float32)
        else:
            entry[key] = torch.from_numpy(arr.copy()).to(REAL_DTYPE)
    opt.load_state_dict({"state": state, "param_groups": groups})


def _codebook_block(cb: Codebook) -> dict[str, np.ndarray]:
    return {
        "entries": cb.entries.numpy(),
        "ema_counts": cb.ema_counts.numpy(),
        "ema_sums": cb.ema_sums.numpy(),
    }


def save_train_state(
    path: str | Path,
    state,
    connector=None,
    extra_meta: dict | None = None,
) -> None:
    """Serialize a TrainState (and optionally a ConnectorState) to disk."""
    from .training import ConnectorState, TrainState  # local import to avoid a cycle

    assert isinstance(state, TrainState)
    blocks: dict[str, dict[str, np.ndarray]] = {"model": _module_block(state.model)}
    meta: dict = {"step": state.step}
    opt_block, groups = _optimizer_block(state.optimizer)
    blocks["optimizer"] = opt_block
    meta["param_groups"] = groups
    if state.codebook is not None:
        blocks["codebook"] = _codebook_block(state.codebook)
        meta["codebook"] = {"decay": state.codebook.decay, "epsilon": state.codebook.epsilon}
    blocks["rng"] = {"generator": state.generator.get_state().numpy()}
    if connector is not None:
        assert isinstance(connector, ConnectorState)
        blocks["connector"] = _module_block(connector.denoiser)
        copt_block, cgroups = _optimizer_block(connector.optimizer)
        blocks["connector_optimizer"] = copt_block
        meta["connector_param_groups"] = cgroups
        meta["connector_step"] = connector.step
        blocks["connector_rng"] = {"generator": connector.generator.get_state().numpy()}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, state.config, blocks, meta)


def load_train_state(path: str | Path, expect: Config | None = None):
    """Rebuild a TrainState (and ConnectorState if present) from disk.

    When ``expect`` is given, its architecture fields must agree with the
    stored config; schedule and rate fields may differ and the stored
    values win for the returned state.
    """
    from .training import ConnectorState, TrainState, StepSchedule, new_connector_state

    cont = read_container(path)
    cfg = cont.config
    if expect is not None:
        expect.check_arch_compatible(cfg)
    from .networks import build_transcoder

    model = build_transcoder(cfg)
    _load_module(model, cont.blocks.get("model", {}), "model")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if "optimizer" in cont.blocks and cont.meta.get("param_groups"):
        _load_optimizer(optimizer, cont.blocks["optimizer"], cont.meta["param_groups"])
    codebook = None
    if "codebook" in cont.blocks:
        cb = cont.blocks["codebook"]
        cb_meta = cont.meta.get("codebook", {})
        codebook = Codebook(
            entries=torch.from_numpy(cb["entries"].copy()),
            ema_counts=torch.from_numpy(cb["ema_counts"].copy()),
            ema_sums=torch.from_numpy(cb["ema_sums"].copy()),
            decay=cb_meta.get("decay", cfg.ema_decay),
            epsilon=cb_meta.get("epsilon", cfg.ema_epsilon),
        )
    generator = torch.Generator()
    if "rng" in cont.blocks:
        generator.set_state(torch.from_numpy(cont.blocks["rng"]["generator"].copy()))
    state = TrainState(
        config=cfg,
        model=model,
        optimizer=optimizer,
        schedule=StepSchedule.from_config(cfg),
        generator=generator,
        codebook=codebook,
        step=int(cont.meta.get("step", 0)),
    )
    connector = None
    if "connector" in cont.blocks:
        connector = new_connector_state(cfg, seed=0)
        _load_module(connector.denoiser, cont.blocks["connector"], "connector")
        if "connector_optimizer" in cont.blocks and cont.meta.get("connector_param_groups"):
            _load_optimizer(
                connector.optimizer,
                cont.blocks["connector_optimizer"],
                cont.meta["connector_param_groups"],
            )
        if "connector_rng" in cont.blocks:
            connector.generator.set_state(
                torch.from_numpy(cont.blocks["connector_rng"]["generator"].copy())
            )
        connector.step = int(cont.meta.get("connector_step", 0))
    return state, connector, cont.meta
