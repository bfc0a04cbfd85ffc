import numpy as np
import pytest

from poisonlab import checkpoint as ckpt
from poisonlab import nn
from poisonlab.data import Sample
from poisonlab.errors import FormatError, IntegrityError
from poisonlab.rng import stream


def build_state(with_ewc=True, with_buffer=True):
    model = nn.add_head(nn.add_head(nn.init_model(21, 12, hidden=(6, 5)), 3), 2)
    rng = stream(5, "ckpt")
    velocity = [rng.normal(0, 0.1, size=p.shape).astype(np.float32)
                for p in nn.all_params(model)]
    optim = nn.OptimState(lr=0.05, momentum=0.9, weight_decay=1e-4, velocity=velocity)
    ewc = None
    if with_ewc:
        ewc = nn.EwcState(
            anchor=[p.copy() for p in nn.trunk_params(model)],
            fisher=[rng.uniform(0, 1, size=p.shape).astype(np.float32)
                    for p in nn.trunk_params(model)],
            merge_coeff=0.5)
    buffer = []
    if with_buffer:
        buffer = [Sample(image=rng.uniform(0, 1, size=(3, 4, 1)).astype(np.float32),
                         label=i % 3, poisoned=bool(i % 2)) for i in range(5)]
    return ckpt.RunState(model=model, optim=optim, ewc=ewc, buffer=buffer, task_index=2)


def assert_states_equal(a, b):
    assert b.task_index == a.task_index
    assert b.model.seed == a.model.seed
    for la, lb in zip(a.model.trunk + a.model.heads, b.model.trunk + b.model.heads):
        assert la.weights.tobytes() == lb.weights.tobytes()
        assert la.bias.tobytes() == lb.bias.tobytes()
    assert (b.optim.lr, b.optim.momentum, b.optim.weight_decay) == (
        a.optim.lr, a.optim.momentum, a.optim.weight_decay)
    for va, vb in zip(a.optim.velocity, b.optim.velocity):
        assert va.tobytes() == vb.tobytes()
    assert (a.ewc is None) == (b.ewc is None)
    if a.ewc is not None:
        assert b.ewc.merge_coeff == a.ewc.merge_coeff
        for xa, xb in zip(a.ewc.anchor + a.ewc.fisher, b.ewc.anchor + b.ewc.fisher):
            assert xa.tobytes() == xb.tobytes()
    assert len(a.buffer) == len(b.buffer)
    for sa, sb in zip(a.buffer, b.buffer):
        assert sa.image.tobytes() == sb.image.tobytes()
        assert (sa.label, sa.poisoned) == (sb.label, sb.poisoned)


class TestRoundTrip:
    def test_identity_bitwise(self):
        state = build_state()
        assert_states_equal(state, ckpt.restore(ckpt.serialize(state)))

    def test_identity_without_optional_parts(self):
        state = build_state(with_ewc=False, with_buffer=False)
        restored = ckpt.restore(ckpt.serialize(state))
        assert restored.ewc is None and restored.buffer == []
        assert_states_equal(state, restored)

    def test_reserialize_is_byte_identical(self):
        blob = ckpt.serialize(build_state())
        assert ckpt.serialize(ckpt.restore(blob)) == blob

    def test_magic_prefix(self):
        assert ckpt.serialize(build_state())[:8] == b"STPCKPT1"


class TestIntegrity:
    def test_corrupted_payload_rejected(self):
        blob = bytearray(ckpt.serialize(build_state()))
        blob[-1] ^= 0xFF
        with pytest.raises(IntegrityError, match="hash mismatch"):
            ckpt.restore(bytes(blob))

    def test_bad_magic_rejected(self):
        blob = b"NOTACKPT" + ckpt.serialize(build_state())[8:]
        with pytest.raises(FormatError, match="magic"):
            ckpt.restore(blob)

    def test_recorded_hash_stable(self):
        blob = ckpt.serialize(build_state())
        assert len(ckpt.recorded_hash(blob)) == 64
        assert ckpt.recorded_hash(ckpt.serialize(ckpt.restore(blob))) == ckpt.recorded_hash(blob)
