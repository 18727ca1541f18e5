import io
import math

import numpy as np
import pytest

from gatedformer.attention import SegmentMemory
from gatedformer.data import Corpus, Vocab, load_splits
from gatedformer.errors import DivergedLoss, NoGates
from gatedformer.harness import (
    CSV_HEADER,
    CsvSink,
    MetricsRecord,
    TrainConfig,
    evaluate,
    export_gate_biases,
    format_gate_biases,
    to_bpc,
    to_ppl,
    train,
)
from gatedformer.model import GatePlacement, ModelConfig, build_model, lm_loss
from gatedformer.optim import SGDAnneal, global_grad_norm


def tiny_model(variant="vanilla", vocab=11, gate=None, **kw):
    cfg = dict(variant=variant, n_layers=1, dh=8, heads=2, d_ffn=16, vocab_size=vocab,
               mem_len=4, local_window=2, precision="double",
               gate=gate or GatePlacement.none())
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), seed=0)


def corpus(n=400, vocab=11, seed=0):
    ids = np.random.default_rng(seed).integers(0, vocab, n)
    return Corpus("char", ids, Vocab("char", range(vocab)))


class TestMetrics:
    @pytest.mark.parametrize("loss,bpc", [(1.068, 1.541), (0.8843, 1.276)])
    def test_bpc_table_values(self, loss, bpc):
        assert abs(to_bpc(loss) - bpc) <= 0.001

    @pytest.mark.parametrize("loss,ppl", [(4.937, 139.4), (4.58, 97.6)])
    def test_ppl_table_values(self, loss, ppl):
        assert abs(to_ppl(loss) - ppl) <= 0.1

    def test_zero_loss(self):
        assert to_bpc(0.0) == 0.0 and to_ppl(0.0) == 1.0

    def test_negative(self):
        with pytest.raises(ValueError):
            to_bpc(-0.1)
        with pytest.raises(ValueError):
            to_ppl(-0.1)

    def test_record_identities(self):
        r = MetricsRecord.from_loss(3, 1, "valid", 2.5, 0.5)
        assert abs(r.ppl - math.exp(2.5)) <= 1e-9 * r.ppl
        assert abs(r.bpc - 2.5 / math.log(2)) <= 1e-9 * r.bpc

    def test_csv_row(self):
        r = MetricsRecord.from_loss(7, 2, "train", 1.0, 0.25, 12)
        assert r.csv_row() == "7,2,train,1,2.71828,1.4427,0.25,12"

    def test_sink_header(self):
        buf = io.StringIO()
        with CsvSink(buf) as sink:
            sink.write(MetricsRecord.from_loss(1, 1, "train", 0.5, 2.0))
        assert buf.getvalue().splitlines()[0] == CSV_HEADER == "step,epoch,split,loss,ppl,bpc,lr,wall_ms"


class TestEvaluate:
    @pytest.mark.parametrize("variant", ["vanilla", "xl", "rt"])
    def test_uniform_logits(self, variant):
        model = tiny_model(variant)
        model.head_w.data[...] = 0.0
        loss, ppl, bpc = evaluate(model, corpus(50), 8)
        assert abs(loss - math.log(11)) < 1e-12
        assert abs(ppl - 11) < 1e-9

    @pytest.mark.parametrize("dh", [16, 128])
    def test_untrained_excess_tracks_logit_variance(self, dh):
        # post-LN features have unit variance, so logits start with variance
        # dh * a^2 / 3 under U(-a, a) and the loss sits about half that above ln V
        ids = np.random.default_rng(0).integers(0, 26, 3000)
        excess = []
        for seed in range(4):
            m = build_model(ModelConfig(n_layers=1, dh=dh, heads=2, d_ffn=32, vocab_size=26),
                            seed=seed)
            excess.append(evaluate(m, ids, 32, batch_size=16)[0] - math.log(26))
        predicted = dh * 0.1 ** 2 / 6
        assert 0.6 * predicted < np.mean(excess) < 1.4 * predicted

    @pytest.mark.parametrize("batch", [2, 3, 16])
    def test_batch_invariance(self, batch):
        model = tiny_model()
        c = corpus(203)
        assert abs(evaluate(model, c, 10, batch_size=batch)[0] - evaluate(model, c, 10)[0]) < 1e-6

    def test_xl_threads_memory(self):
        model = tiny_model("xl")
        ids = corpus(25).ids
        mem = SegmentMemory.empty(1, 4)
        total = 0.0
        for a in range(0, 24, 6):
            b = min(a + 6, 24)
            loss, mem = lm_loss(model, ids[None, a:b], ids[None, a + 1:b + 1], mem)
            total += float(loss.data) * (b - a)
        assert abs(evaluate(model, ids, 6)[0] - total / 24) < 1e-12

    def test_xl_memory_changes_score(self):
        model = tiny_model("xl")
        c = corpus(60)
        assert evaluate(model, c, 6, mem_len=0)[0] != evaluate(model, c, 6, mem_len=6)[0]

    def test_too_short(self):
        with pytest.raises(ValueError):
            evaluate(tiny_model(), np.array([1]), 4)

    def test_no_graph_left_behind(self):
        model = tiny_model()
        evaluate(model, corpus(40), 8)
        assert all(p.grad is None for p in model.parameters())


class RecordingSGD(SGDAnneal):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.norms = []

    def step(self, named):
        self.norms.append(global_grad_norm(named.values()))
        super().step(named)


class TestTrain:
    def cfg(self, **kw):
        base = dict(lr=0.5, batch_size=2, seq_len=8, max_steps=6, eval_interval=3, seed=4)
        base.update(kw)
        return TrainConfig(**base)

    def test_one_step_descends(self):
        model = tiny_model()
        c = corpus(200)
        x, y = c.ids[None, :8], c.ids[None, 1:9]
        before = float(lm_loss(model, x, y)[0].data)
        train(model, Corpus("char", c.ids[:9], c.vocab), self.cfg(lr=0.05, batch_size=1,
                                                                  max_steps=1))
        assert float(lm_loss(model, x, y)[0].data) < before

    def test_clipping_bound(self):
        opt = RecordingSGD(lr=0.5, clip_norm=0.15)
        train(tiny_model(), corpus(), self.cfg(), optimizer=opt)
        assert max(opt.norms) <= 0.15 + 1e-9
        assert len(opt.norms) == 6

    def test_records_and_schedule(self):
        records = train(tiny_model(), corpus(), self.cfg(max_steps=7), valid=corpus(60, seed=1))
        train_steps = [r.step for r in records if r.split == "train"]
        valid_steps = [r.step for r in records if r.split == "valid"]
        assert train_steps == list(range(1, 8))
        assert valid_steps == [3, 6, 7]
        for r in records:
            assert r.ppl == pytest.approx(math.exp(r.loss), rel=1e-9)

    def test_deterministic_csv(self):
        outs = []
        for _ in range(2):
            buf = io.StringIO()
            train(tiny_model(dropout_sublayer=0.1), corpus(), self.cfg(), valid=corpus(60, seed=1),
                  sink=CsvSink(buf))
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]
        assert outs[0].count("\n") == 1 + 6 + 2

    def test_epochs(self):
        records = train(tiny_model(), corpus(100), self.cfg(max_steps=0, epochs=2))
        per_epoch = (50 - 1) // 8
        assert [r.epoch for r in records] == [1] * per_epoch + [2] * per_epoch

    def test_xl_memory_reset_each_epoch(self, monkeypatch):
        model = tiny_model("xl")
        calls = []
        original = model.empty_memory
        monkeypatch.setattr(model, "empty_memory", lambda: calls.append(1) or original())
        train(model, corpus(100), self.cfg(max_steps=0, epochs=3))
        assert len(calls) == 3

    def test_divergence(self):
        model = tiny_model()
        model.head_w.data[0, 0] = np.nan
        with pytest.raises(DivergedLoss) as info:
            train(model, corpus(), self.cfg())
        assert info.value.records == []
        assert "1" in str(info.value)

    def test_annealing_records_lr(self):
        records = train(tiny_model(), corpus(), self.cfg(max_steps=9, eval_interval=1, lr=3.0),
                        valid=corpus(60, seed=1))
        lrs = [r.lr for r in records if r.split == "train"]
        assert lrs[0] == 3.0
        assert all(b in (a, a * 0.25) for a, b in zip(lrs, lrs[1:]))

    def test_adam(self):
        records = train(tiny_model(), corpus(), self.cfg(optimizer="adam", lr=0.01, clip_norm=0))
        assert len(records) == 6

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="seq_len"):
            train(tiny_model(), corpus(), self.cfg(seq_len=0))

    def test_wall_clock(self):
        ticks = iter(np.arange(0, 100, 0.01))
        records = train(tiny_model(), corpus(), self.cfg(wall_clock=True),
                        clock=lambda: float(next(ticks)))
        walls = [r.wall_ms for r in records]
        assert walls == sorted(walls) and walls[-1] > 0

    def test_checkpoint_callback(self):
        seen = []
        train(tiny_model(), corpus(), self.cfg(), on_checkpoint=lambda s, o: seen.append(s),
              checkpoint_interval=4)
        assert seen == [4, 6]

    def test_toy_corpus_learns(self, toy_corpus_dir):
        splits = load_splits({"train": toy_corpus_dir / "train.txt",
                              "valid": toy_corpus_dir / "valid.txt"}, "char")
        model = tiny_model(vocab=len(splits["train"].vocab), precision="single")
        before = evaluate(model, splits["valid"], 16)[0]
        train(model, splits["train"], self.cfg(lr=0.5, batch_size=4, seq_len=16, max_steps=60,
                                               eval_interval=0))
        assert evaluate(model, splits["valid"], 16)[0] < before


class TestGateExport:
    def test_twelve_zero_rows(self, tmp_path):
        model = tiny_model(n_layers=6, gate=GatePlacement.on("sdu-sigmoid", range(1, 7)))
        path = export_gate_biases(model, tmp_path / "b.tsv")
        rows = [line.split("\t") for line in path.read_text().splitlines()]
        assert len(rows) == 12 == len(model.gates())
        assert [r[0] for r in rows[:4]] == ["a1", "b1", "a2", "b2"]
        assert all(len(r) == 9 and all(float(v) == 0.0 for v in r[1:]) for r in rows)

    def test_full_precision(self):
        model = tiny_model(gate=GatePlacement.on("sdu-tanh", [1], include_ffn=False))
        model.gates()[0][1].b1.data[:] = np.linspace(-1, 1, 8) / 3
        vals = [float(v) for v in format_gate_biases(model).split("\t")[1:]]
        np.testing.assert_array_equal(vals, model.gates()[0][1].b1.data)

    def test_no_gates(self, tmp_path):
        with pytest.raises(NoGates):
            export_gate_biases(tiny_model(), tmp_path / "b.tsv")
