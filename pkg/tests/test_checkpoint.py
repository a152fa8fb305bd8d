import pytest
import torch

from phasemem import checkpoint
from phasemem.exceptions import CheckpointError
from phasemem.model import ModelConfig, PhaseLM
from phasemem.train import Corpus, TrainConfig, Trainer, make_optimizer

TINY = ModelConfig(dim=16, n_layers=2, n_heads=2, head_dim=8)


def test_round_trip_is_bit_exact(tmp_path):
    model = PhaseLM(TINY.replace(seed=9))
    checkpoint.save(tmp_path / "m.bin", model, step=12, extra={"note": "x"})
    loaded, header, opt = checkpoint.load(tmp_path / "m.bin")
    assert opt is None
    assert header["step"] == 12 and header["extra"] == {"note": "x"}
    assert loaded.cfg == model.cfg
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_low_level_writer_manifest(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([1.5])}
    checkpoint.write_checkpoint(tmp_path / "c.bin", tensors, {"step": 0})
    header, back = checkpoint.read_checkpoint(tmp_path / "c.bin")
    assert [e["name"] for e in header["manifest"]] == ["a", "b"]
    assert header["manifest"][1]["offset"] == 24
    assert all(torch.equal(tensors[k], back[k]) for k in tensors)
    assert (tmp_path / "c.bin").read_bytes()[:8] == b"PAMCKPT1"


def test_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="bad magic"):
        checkpoint.read_checkpoint(tmp_path / "x.bin")


def test_truncated_buffer(tmp_path):
    checkpoint.save(tmp_path / "m.bin", PhaseLM(TINY))
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.read_checkpoint(tmp_path / "cut.bin")


def _trainer(corpus, model=None, optimizer=None, step=0):
    cfg = TrainConfig(seq_len=32, batch_size=4, max_steps=10, warmup_steps=3, lr=1e-3)
    model = model or PhaseLM(TINY)
    return Trainer(model, corpus, cfg, step=step, optimizer=optimizer)


def test_resume_reproduces_trajectory(tmp_path, small_text):
    corpus = Corpus.from_bytes(small_text[:30_000])
    full = []
    _trainer(corpus).run(on_step=lambda t, loss, g, lr: full.append(loss))

    first = []
    t = _trainer(corpus)
    t.run(until=4, on_step=lambda t, loss, g, lr: first.append(loss))
    checkpoint.save(tmp_path / "r.bin", t.model, t.step, t.optimizer)

    model, header, opt = checkpoint.load(tmp_path / "r.bin", lambda m: make_optimizer(m, t.cfg))
    rest = []
    _trainer(corpus, model, opt, header["step"]).run(on_step=lambda t, loss, g, lr: rest.append(loss))
    assert first + rest == full
