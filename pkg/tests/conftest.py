import pytest

from poisonlab.data import StreamSpec, make_stream
from poisonlab.methods import MethodConfig


def tiny_stream_spec(seed=0, **kwargs):
    defaults = dict(class_pool_size=6, task_class_counts=(2, 2, 2), image_side=8,
                    train_per_class=12, val_per_class=4, test_per_class=6,
                    grating_cycles_max=None, seed=seed)
    defaults.update(kwargs)
    return StreamSpec(**defaults)


def tiny_method(method="FINETUNE", **kwargs):
    defaults = dict(method=method, epochs=3, batch_size=8, hidden=(16, 16),
                    lr_decay_epochs=(2,), buffer_capacity=12)
    defaults.update(kwargs)
    return MethodConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_tasks():
    return make_stream(tiny_stream_spec())
