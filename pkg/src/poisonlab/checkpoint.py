"""Binary checkpoint format for rollback.

Layout: 8-byte magic ``STPCKPT1``, an 8-byte little-endian manifest length,
the manifest as UTF-8 ``key: value`` lines, then every parameter array as
little-endian IEEE-754 float32 in declaration order (trunk, heads, optimizer
velocity, EWC anchor, EWC fisher, replay-buffer images).

The manifest records a sha256 of the array payload; restore verifies it and
rebuilds the exact pre-serialization state bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import Sample
from .errors import FormatError, IntegrityError
from .nn import DenseLayer, EwcState, ModelState, OptimState

MAGIC = b"STPCKPT1"
_F32 = np.dtype("<f4")


@dataclass
class RunState:
    model: ModelState
    optim: OptimState
    ewc: EwcState | None = None
    buffer: list = field(default_factory=list)
    task_index: int = 0


def _arrays_of(state: RunState):
    """(name, array) pairs in declaration order."""
    out = []
    for i, layer in enumerate(state.model.trunk):
        out.append((f"trunk{i}.weights", layer.weights))
        out.append((f"trunk{i}.bias", layer.bias))
    for i, head in enumerate(state.model.heads):
        out.append((f"head{i}.weights", head.weights))
        out.append((f"head{i}.bias", head.bias))
    for i, v in enumerate(state.optim.velocity):
        out.append((f"velocity{i}", v))
    if state.ewc is not None:
        for i, a in enumerate(state.ewc.anchor):
            out.append((f"ewc_anchor{i}", a))
        for i, f in enumerate(state.ewc.fisher):
            out.append((f"ewc_fisher{i}", f))
    if state.buffer:
        out.append(("buffer_images", np.stack([s.image for s in state.buffer])))
    return out


def serialize(state: RunState) -> bytes:
    arrays = _arrays_of(state)
    payload = b"".join(np.ascontiguousarray(a, dtype=_F32).tobytes() for _, a in arrays)
    digest = hashlib.sha256(payload).hexdigest()
    lines = [
        "version: 1",
        f"task_index: {state.task_index}",
        f"model_seed: {state.model.seed}",
        f"input_width: {state.model.input_width}",
        f"trunk_layers: {len(state.model.trunk)}",
        f"head_count: {len(state.model.heads)}",
        f"optim_lr: {state.optim.lr!r}",
        f"optim_momentum: {state.optim.momentum!r}",
        f"optim_weight_decay: {state.optim.weight_decay!r}",
        f"velocity_count: {len(state.optim.velocity)}",
        f"ewc_present: {int(state.ewc is not None)}",
    ]
    if state.ewc is not None:
        lines.append(f"ewc_merge_coeff: {state.ewc.merge_coeff!r}")
        lines.append(f"ewc_term_count: {len(state.ewc.anchor)}")
    lines.append(f"buffer_count: {len(state.buffer)}")
    if state.buffer:
        lines.append("buffer_labels: " + ",".join(str(s.label) for s in state.buffer))
        lines.append("buffer_poisoned: " + ",".join(str(int(s.poisoned)) for s in state.buffer))
    for name, a in arrays:
        shape = " ".join(str(d) for d in np.asarray(a).shape)
        lines.append(f"array: {name} {shape}".rstrip())
    lines.append(f"hash: {digest}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    return MAGIC + len(manifest).to_bytes(8, "little") + manifest + payload


def _parse_manifest(text: str):
    fields, arrays = {}, []
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(": ")
        if key == "array":
            parts = value.split()
            arrays.append((parts[0], tuple(int(d) for d in parts[1:])))
        else:
            fields[key] = value
    return fields, arrays


def restore(blob: bytes) -> RunState:
    if blob[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:8]!r}")
    manifest_len = int.from_bytes(blob[8:16], "little")
    manifest = blob[16:16 + manifest_len].decode("utf-8")
    payload = blob[16 + manifest_len:]
    fields, array_decls = _parse_manifest(manifest)
    digest = hashlib.sha256(payload).hexdigest()
    if digest != fields["hash"]:
        raise IntegrityError(
            f"checkpoint hash mismatch: payload {digest[:12]}.. vs recorded {fields['hash'][:12]}..")

    arrays = {}
    offset = 0
    for name, shape in array_decls:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise FormatError(f"checkpoint payload truncated at array {name}")
        arrays[name] = np.frombuffer(payload, dtype=_F32, count=count,
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"checkpoint payload has {len(payload) - offset} trailing bytes")

    trunk = [DenseLayer(arrays[f"trunk{i}.weights"], arrays[f"trunk{i}.bias"])
             for i in range(int(fields["trunk_layers"]))]
    heads = [DenseLayer(arrays[f"head{i}.weights"], arrays[f"head{i}.bias"])
             for i in range(int(fields["head_count"]))]
    model = ModelState(trunk=trunk, heads=heads, seed=int(fields["model_seed"]),
                       input_width=int(fields["input_width"]))
    optim = OptimState(
        lr=float(fields["optim_lr"]),
        momentum=float(fields["optim_momentum"]),
        weight_decay=float(fields["optim_weight_decay"]),
        velocity=[arrays[f"velocity{i}"] for i in range(int(fields["velocity_count"]))],
    )
    ewc = None
    if int(fields["ewc_present"]):
        n_terms = int(fields["ewc_term_count"])
        ewc = EwcState(
            anchor=[arrays[f"ewc_anchor{i}"] for i in range(n_terms)],
            fisher=[arrays[f"ewc_fisher{i}"] for i in range(n_terms)],
            merge_coeff=float(fields["ewc_merge_coeff"]),
        )
    buffer = []
    if int(fields["buffer_count"]):
        labels = [int(v) for v in fields["buffer_labels"].split(",")]
        flags = [bool(int(v)) for v in fields["buffer_poisoned"].split(",")]
        images = arrays["buffer_images"]
        buffer = [Sample(image=images[i], label=labels[i], poisoned=flags[i])
                  for i in range(len(labels))]
    return RunState(model=model, optim=optim, ewc=ewc, buffer=buffer,
                    task_index=int(fields["task_index"]))


def recorded_hash(blob: bytes) -> str:
    """The payload hash stored in a checkpoint's manifest."""
    if blob[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:8]!r}")
    manifest_len = int.from_bytes(blob[8:16], "little")
    fields, _ = _parse_manifest(blob[16:16 + manifest_len].decode("utf-8"))
    return fields["hash"]
