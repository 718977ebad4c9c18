import numpy as np
import pytest

from domainadaptor.checkpoint import (MAGIC, checkpoint_extra, load_checkpoint, load_tensors, save_checkpoint,
                                      save_tensors)
from domainadaptor.errors import IncompatibleSnapshotError
from domainadaptor.nn import SOURCE, LayerSpec, Model, small_convnet


@pytest.mark.parametrize("dtype", ["float32", "float64", "int64", "int32", "uint8"])
def test_tensor_round_trip(tmp_path, rng, dtype):
    arr = (rng.normal(size=(2, 3, 4)) * 50).astype(dtype)
    save_tensors(tmp_path / "t.dac", {"a": arr, "scalar": np.array(3, dtype=dtype)}, {"k": [1, 2]})
    tensors, meta = load_tensors(tmp_path / "t.dac")
    assert meta == {"k": [1, 2]}
    assert tensors["a"].dtype == arr.dtype and np.array_equal(tensors["a"], arr)
    assert tensors["scalar"].shape == () and tensors["scalar"] == 3


def test_manifest_is_readable_text(tmp_path):
    save_tensors(tmp_path / "t.dac", {"w": np.zeros((2, 2), np.float32)}, {})
    head = (tmp_path / "t.dac").read_bytes().split(b"end\n")[0].decode()
    assert head.splitlines() == [MAGIC, "meta {}", "tensor w float32 2,2 0 16"]


def test_rejects_bad_inputs(tmp_path):
    with pytest.raises(ValueError):
        save_tensors(tmp_path / "t.dac", {"a b": np.zeros(1)}, {})
    with pytest.raises(ValueError):
        save_tensors(tmp_path / "t.dac", {"c": np.zeros(1, np.complex64)}, {})
    (tmp_path / "junk").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "junk")


def test_model_round_trip_is_exact(tmp_path, model32, images32):
    save_checkpoint(model32, tmp_path / "m.dac", extra={"held_out": "sketch"})
    loaded = load_checkpoint(tmp_path / "m.dac")
    assert np.array_equal(loaded.forward(images32, SOURCE), model32.forward(images32, SOURCE))
    assert checkpoint_extra(tmp_path / "m.dac") == {"held_out": "sketch"}


def test_bytes_are_deterministic(tmp_path):
    for name in ("a.dac", "b.dac"):
        save_checkpoint(Model(small_convnet(), seed=4), tmp_path / name)
    assert (tmp_path / "a.dac").read_bytes() == (tmp_path / "b.dac").read_bytes()


def test_architecture_mismatch(tmp_path):
    model = Model(small_convnet(), seed=0)
    tensors = {f"param:{k}": v for k, v in model.params.items()}
    tensors["param:conv1.weight"] = np.zeros((1, 1, 1, 1), np.float32)
    save_tensors(tmp_path / "m.dac", tensors, {"architecture": model.architecture()})
    with pytest.raises(IncompatibleSnapshotError):
        load_checkpoint(tmp_path / "m.dac")
    save_tensors(tmp_path / "n.dac", {}, {})
    with pytest.raises(IncompatibleSnapshotError):
        load_checkpoint(tmp_path / "n.dac")


def test_custom_architecture(tmp_path, rng):
    specs = [LayerSpec("conv2d", "c", 3, 2, 3, 1, 1), LayerSpec("batchnorm2d", "bn", 2, 2),
             LayerSpec("relu", "r"), LayerSpec("global-avg-pool", "p"), LayerSpec("linear", "fc", 2, 4)]
    model = Model(specs, seed=1, dtype=np.float64)
    save_checkpoint(model, tmp_path / "m.dac")
    loaded = load_checkpoint(tmp_path / "m.dac")
    x = rng.normal(size=(2, 3, 5, 5))
    assert loaded.dtype == np.float64
    assert np.array_equal(loaded.forward(x, SOURCE), model.forward(x, SOURCE))
