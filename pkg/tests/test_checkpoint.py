import numpy as np
import pytest

from moe_absa.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointFormatError,
    CheckpointIntegrityError,
    dumps,
    load_checkpoint,
    loads,
    model_from_checkpoint,
    provider_from_checkpoint,
    restore_rng,
    save_checkpoint,
)
from moe_absa.pipeline import StageConfig, evaluate, train_stage
from moe_absa.text import HashedNgramProvider, split_dataset, synth_corpus

PROVIDER = HashedNgramProvider(64, 3)


@pytest.fixture(scope="module")
def split():
    return split_dataset(synth_corpus(2, 120), seed=2)


@pytest.fixture(scope="module", params=["sentiment", "acd", "absa"])
def trained(request, split):
    cfg = StageConfig(request.param, learning_rate=1e-3, epochs=1, hidden=8)
    return train_stage(split, cfg, PROVIDER)


def test_round_trip_is_bit_exact(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.model, path, rng=trained.rng, metrics={"f1": 0.5})
    ckpt = load_checkpoint(path)
    restored = model_from_checkpoint(ckpt, expect_stage=trained.model.stage)
    for name, p in trained.model.parameters().items():
        assert p.values.tobytes() == restored.parameters()[name].values.tobytes()
    assert restored.config == trained.model.config
    assert ckpt.metrics == {"f1": 0.5}
    assert provider_from_checkpoint(ckpt).describe() == PROVIDER.describe()


def test_round_trip_preserves_predictions(trained, split, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.model, path)
    restored = model_from_checkpoint(load_checkpoint(path))
    a = evaluate(trained.model, split.test, PROVIDER)
    b = evaluate(restored, split.test, PROVIDER)
    assert np.array_equal(a.probs, b.probs)


def test_rng_state_restored(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    rng = np.random.default_rng(17)
    rng.random(5)
    save_checkpoint(trained.model, path, rng=rng)
    back = restore_rng(load_checkpoint(path))
    assert np.array_equal(back.random(4), rng.random(4))
    save_checkpoint(trained.model, path)
    assert restore_rng(load_checkpoint(path)) is None


def test_stage_mismatch_rejected(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.model, path)
    other = "absa" if trained.model.stage != "absa" else "acd"
    with pytest.raises(CheckpointFormatError):
        model_from_checkpoint(load_checkpoint(path), expect_stage=other)


def _ckpt(split):
    model = train_stage(split, StageConfig("sentiment", epochs=1), PROVIDER).model
    tensors = {k: p.values for k, p in model.parameters().items()}
    return Checkpoint(model.stage, model.config.to_dict(), model.provider_info, tensors)


def test_corruption_is_detected(split):
    blob = dumps(_ckpt(split))
    assert blob.startswith(MAGIC)
    flipped = bytearray(blob)
    flipped[-20] ^= 0x01
    with pytest.raises(CheckpointIntegrityError):
        loads(bytes(flipped))
    with pytest.raises(CheckpointIntegrityError):
        loads(blob[:-9])


def test_bad_magic_and_version(split):
    blob = dumps(_ckpt(split))
    with pytest.raises(CheckpointFormatError):
        loads(b"NOTACKPT" + blob[8:])
    bumped = blob.replace(b'"format_version":1', b'"format_version":9')
    with pytest.raises(CheckpointFormatError):
        loads(bumped)


def test_f4_payload_is_lossy_but_valid(split):
    ckpt = _ckpt(split)
    back = loads(dumps(ckpt, dtype="f4"))
    for k, v in ckpt.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v.astype(np.float32).astype(np.float64))
    with pytest.raises(ValueError):
        dumps(ckpt, dtype="f2")
