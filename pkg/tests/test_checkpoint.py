import struct

import numpy as np
import pytest

from gatedformer.checkpoint import (
    MAGIC,
    VERSION,
    load_checkpoint,
    model_config_from_items,
    model_config_items,
    read_checkpoint,
    save_checkpoint,
)
from gatedformer.data import Corpus, Vocab
from gatedformer.errors import ChecksumMismatch, CheckpointError, VersionMismatch
from gatedformer.harness import TrainConfig, train
from gatedformer.model import GatePlacement, ModelConfig, build_model, forward_lm


def cfg(**kw):
    base = dict(variant="xl", n_layers=2, dh=8, heads=2, d_ffn=16, vocab_size=13, mem_len=3,
                gate=GatePlacement.on("sdu-tanh", [2], include_ffn=False))
    base.update(kw)
    return ModelConfig(**base)


def trained(tmp_path, optimizer="adam", **kw):
    model = build_model(cfg(**kw), seed=2)
    ids = np.random.default_rng(0).integers(0, 13, 200)
    corpus = Corpus("char", ids, Vocab("char", list(range(13))))
    tc = TrainConfig(optimizer=optimizer, lr=0.01, clip_norm=0.15, batch_size=2, seq_len=6,
                     max_steps=4, eval_interval=2)
    opt = tc.make_optimizer()
    train(model, corpus, tc, valid=corpus, optimizer=opt)
    path = save_checkpoint(tmp_path / "m.gfck", model, opt, step=4, seed=11,
                           vocab=corpus.vocab, run={"seq_len": "6"})
    return model, opt, path


class TestRoundTrip:
    @pytest.mark.parametrize("precision", ["single", "double"])
    @pytest.mark.parametrize("variant", ["vanilla", "xl", "rt"])
    def test_forward_bitwise(self, tmp_path, precision, variant):
        model, _, path = trained(tmp_path, variant=variant, precision=precision)
        loaded = load_checkpoint(path).model
        tokens = np.random.default_rng(5).integers(0, 13, (2, 7))
        a, _ = forward_lm(model, tokens)
        b, _ = forward_lm(loaded, tokens)
        assert a.data.dtype == b.data.dtype
        assert a.data.tobytes() == b.data.tobytes()

    def test_all_tensors_bitwise(self, tmp_path):
        model, _, path = trained(tmp_path)
        loaded = load_checkpoint(path).model.named_parameters()
        for k, p in model.named_parameters().items():
            assert loaded[k].data.tobytes() == p.data.tobytes()

    def test_state(self, tmp_path):
        _, opt, path = trained(tmp_path)
        ck = load_checkpoint(path)
        assert (ck.step, ck.seed, ck.run) == (4, 11, {"seq_len": "6"})
        assert ck.vocab == Vocab("char", list(range(13)))
        assert ck.optimizer.scalars() == opt.scalars()
        for k, v in opt.tensors().items():
            assert ck.optimizer.tensors()[k].tobytes() == v.tobytes()

    def test_sgd_state(self, tmp_path):
        _, opt, path = trained(tmp_path, optimizer="sgd")
        assert load_checkpoint(path).optimizer.scalars() == opt.scalars()

    def test_config_items(self):
        c = cfg(init="gaussian", init_scale=0.02, precision="double")
        assert model_config_from_items(model_config_items(c)) == c
        plain = cfg(gate=GatePlacement.none())
        assert model_config_from_items(model_config_items(plain)) == plain

    def test_layout(self, tmp_path):
        _, _, path = trained(tmp_path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC == b"GFCK"
        assert struct.unpack("<I", raw[4:8])[0] == VERSION
        items, tensors = read_checkpoint(path)
        assert items["model.variant"] == "xl"
        assert "embed.weight" in tensors and "opt.m.embed.weight" in tensors


class TestCorruption:
    def test_truncated(self, tmp_path):
        _, _, path = trained(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(path)

    def test_flipped_byte(self, tmp_path):
        _, _, path = trained(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(path)

    def test_version_bump(self, tmp_path):
        _, _, path = trained(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4] += 1
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.gfck"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_tiny_file(self, tmp_path):
        p = tmp_path / "x.gfck"
        p.write_bytes(MAGIC + b"\x01")
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(p)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.gfck")
