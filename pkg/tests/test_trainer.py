import json
import math
import threading

import numpy as np
import pytest

from hmid import trainer as T
from hmid.data import build_corpus
from hmid.encoders import init_params
from hmid.trainer import ConfigError, TrainConfig, TrainingError


def tiny(**kw) -> TrainConfig:
    base = dict(embed_dim=16, heads=2, depth=1, mlp_ratio=2, batch_size=8, max_iters=20,
                log_every=5, eval_every=10)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(40, 1)


@pytest.fixture(scope="module")
def teacher(corpus):
    return T.train_teacher(tiny(max_iters=10), corpus.subset("train"), gate=None).params


class TestSchedule:
    def test_junctions(self):
        assert T.lr_at(0, 1000, 5e-4, 0.1) == 0.0
        assert T.lr_at(100, 1000, 5e-4, 0.1) == 5e-4
        assert abs(T.lr_at(1000, 1000, 5e-4, 0.1)) <= 1e-12

    def test_continuous_and_nonincreasing_after_warmup(self):
        lrs = np.array([T.lr_at(s, 1000, 1.0, 0.1) for s in range(1001)])
        assert np.all(np.diff(lrs[:101]) > 0)
        assert np.all(np.diff(lrs[100:]) <= 0)
        assert np.max(np.abs(np.diff(lrs))) < 0.011

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            T.lr_at(1001, 1000, 1.0, 0.1)


class TestConfig:
    def test_parse_and_types(self):
        vals = T.parse_config_text("max_iters = 30  # short\n\nmask_ratio=0.25\nmode = meru\n"
                                   "lambda_hierarchy = 1\n")
        assert vals == {"max_iters": 30, "mask_ratio": 0.25, "mode": "meru", "lambda_hierarchy": 1.0}

    def test_error_carries_line_number(self):
        with pytest.raises(ConfigError) as info:
            T.parse_config_text("max_iters = 3\nbatch_size = lots\n")
        assert info.value.line == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            T.parse_config_text("# header\nlearning_rate = 1\n")
        assert info.value.line == 2

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("max_iters = 30\nseed = 4\n")
        cfg = T.load_config(path, {"seed": 9, "batch_size": None})
        assert (cfg.max_iters, cfg.seed, cfg.batch_size) == (30, 9, 64)

    def test_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_frac=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(tau_min=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(mode="poincare")

    def test_hash_is_stable(self):
        assert T.config_hash(TrainConfig()) == T.config_hash(TrainConfig())
        assert T.config_hash(TrainConfig()) != T.config_hash(TrainConfig(seed=1))

    def test_paper_defaults(self):
        c = TrainConfig()
        assert (c.base_lr, c.weight_decay, c.warmup_frac, c.tau_init, c.tau_min, c.c_init,
                c.c_max, c.K) == (5e-4, 0.2, 0.1, 0.7, 0.01, 1.0, 10.0, 0.1)


def first_batch(corpus, cfg):
    return next(T.batch_stream(corpus, cfg))


class TestStep:
    def test_zero_lr_leaves_params_unchanged(self, corpus):
        cfg = tiny()
        p = init_params(cfg.encoder_config(), 0)
        before = p.checksum()
        T.train_step(p, None, first_batch(corpus, cfg), cfg, T.init_optimizer(p), lr=0.0)
        assert p.checksum() == before

    def test_tau_clamped_exactly(self, corpus):
        cfg = tiny()
        p = init_params(cfg.encoder_config(), 0)
        state = T.init_optimizer(p)
        T.adamw_update(p, {"tau": np.array(5.0, dtype=np.float32)}, state, 1.0, cfg)
        assert float(p.tau.data) < 0.01
        T.apply_clamps(p, cfg)
        assert p.tau.data == np.float32(0.01)

    def test_curvature_clamped(self, corpus):
        cfg = tiny()
        p = init_params(cfg.encoder_config(), 0)
        p.curv.data = np.asarray(25.0, dtype=np.float32)
        T.apply_clamps(p, cfg)
        assert p.curv.data == np.float32(10.0)
        p.curv.data = np.asarray(-1.0, dtype=np.float32)
        T.apply_clamps(p, cfg)
        assert 0 < float(p.curv.data) <= 10

    def test_no_decay_on_scalars_gains_biases(self):
        p = init_params(tiny().encoder_config(), 0)
        decayed = {n for n, t in p.trainable() if T.decays(n, t)}
        assert not decayed & {"tau", "curv", "alpha_img", "alpha_txt", "image.patch.b",
                              "text.blocks.0.ln1.g"}
        assert "image.patch.w" in decayed

    def test_overfits_a_fixed_batch(self, corpus):
        cfg = tiny(mask_ratio=0.0, max_iters=200, lambda_entail=0.0)
        p = init_params(cfg.encoder_config(), 0)
        state = T.init_optimizer(p)
        batch = first_batch(corpus, cfg)
        losses = [T.train_step(p, None, batch, cfg, state, lr=1e-3)[2].as_floats()["total"]
                  for _ in range(200)]
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

    def test_non_finite_loss_names_the_batch(self, corpus):
        cfg = tiny()
        p = init_params(cfg.encoder_config(), 0)
        p["image.proj"].data[:] = np.nan
        with pytest.raises(TrainingError, match="batch index 0"):
            T.train_step(p, None, first_batch(corpus, cfg), cfg, T.init_optimizer(p))

    def test_frozen_params_refused(self, corpus, teacher):
        cfg = tiny(width=32)
        with pytest.raises(TrainingError):
            T.train_step(teacher, None, first_batch(corpus, cfg), cfg, T.init_optimizer(teacher))

    def test_meru_mode_has_no_distillation(self, corpus, teacher):
        cfg = tiny(mode="meru")
        p = init_params(cfg.encoder_config(), 0)
        cache = T.TeacherCache(teacher, corpus)
        report = T.train_step(p, cache, first_batch(corpus, cfg), cfg, T.init_optimizer(p))[2]
        assert report.as_floats()["distillation"] == 0.0


class TestTeacher:
    def test_teacher_is_frozen_and_wider(self, teacher):
        assert teacher.frozen
        assert teacher.config.width == 32
        assert teacher.config.embed_dim == 16

    def test_teacher_checkpoint_flag(self, corpus, tmp_path):
        res = T.train_teacher(tiny(max_iters=4), corpus, out_dir=tmp_path, gate=None)
        loaded = T.load_teacher(res.final_checkpoint)
        assert loaded.frozen

    def test_gate(self, corpus):
        with pytest.raises(TrainingError, match="gate"):
            T.train_teacher(tiny(max_iters=2), corpus, val=corpus, gate=1.01)

    def test_shared_curvature_at_start(self, corpus, teacher):
        teacher.curv.data = np.asarray(0.37, dtype=np.float32)
        res = T.train_loop(tiny(max_iters=1, base_lr=0.0), corpus, teacher)
        assert float(res.params.curv.data) == pytest.approx(0.37)


class TestLoop:
    def test_outputs_and_invariants(self, corpus, teacher, tmp_path):
        cfg = tiny()
        checksum = teacher.checksum()
        res = T.train_loop(cfg, corpus.subset("train"), teacher, out_dir=tmp_path,
                           val=corpus.subset("val"))
        assert (tmp_path / "final.ckpt").exists() and (tmp_path / "best.ckpt").exists()
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 4
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "lr", "total", "contrastive", "distillation", "entailment",
                            "hierarchy", "tau", "c", "wall_ms"}
        assert teacher.checksum() == checksum
        assert res.metrics[-1]["distillation"] > 0

    def test_deterministic(self, corpus, teacher, tmp_path):
        def run(sub):
            T.train_loop(tiny(), corpus, teacher, out_dir=tmp_path / sub)
            recs = [json.loads(l) for l in (tmp_path / sub / "metrics.jsonl").read_text().splitlines()]
            for r in recs:
                r.pop("wall_ms")
            return recs, (tmp_path / sub / "final.ckpt").read_bytes()

        assert run("a") == run("b")

    def test_unmasked_tuning_tail(self):
        cfg = tiny(max_iters=200, unmasked_tuning_frac=0.025, mask_ratio=0.5)
        ratios = [T.mask_ratio_at(s, cfg) for s in range(200)]
        assert ratios[:195] == [0.5] * 195 and ratios[195:] == [0.0] * 5

    def test_tuning_batches_are_unmasked(self, corpus):
        cfg = tiny(max_iters=10, unmasked_tuning_frac=0.2)
        batches = list(T.batch_stream(corpus, cfg))
        assert [b.patches.num_kept for b in batches] == [8] * 8 + [16] * 2

    def test_empty_corpus(self, corpus):
        with pytest.raises(TrainingError):
            T.train_loop(tiny(), corpus.subset("nothing"))

    def test_unwritable_output(self, corpus, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(TrainingError, match="file"):
            T.train_loop(tiny(), corpus, out_dir=blocker / "sub")

    def test_clip_mode_runs(self, corpus):
        res = T.train_loop(tiny(mode="clip", max_iters=3), corpus)
        assert math.isfinite(res.metrics[-1]["total"])


def test_prefetch_is_bounded():
    produced = []
    gate = threading.Event()

    def source():
        for i in range(10):
            produced.append(i)
            yield i

    it = T.prefetch(source(), capacity=2)
    first = next(it)
    # give the worker time to run ahead
    gate.wait(0.2)
    assert first == 0
    assert len(produced) <= 4  # one consumed, two queued, one blocked in put()
    assert list(it) == list(range(1, 10))
