"""Learning-rate policies, batch scheduling, staged training and resume."""
import csv
import math
import os

import mpmath
import numpy as np
import pytest

from sdnface.errors import (
    ManifestError,
    NumericalDivergenceError,
    ShapeMismatchError,
    SpecValidationError,
)
from sdnface.model import (
    GroupSpec,
    NetworkSpec,
    build_network,
    load_weights,
)
from sdnface.train import (
    LrPolicy,
    ManifestDataset,
    StageSchedule,
    TrainingLog,
    batch_indices,
    default_stage_policy,
    lr_at,
    read_stage_config,
    run_three_stage,
    train_stage,
)

TINY64 = NetworkSpec(n_landmarks=5, input_side=64,
                     groups=(GroupSpec(3, 2, 2), GroupSpec(3, 2, 2),
                             GroupSpec(3, 2, 2)), fc_hidden=8, seed=1)


def mp_lr(policy, iteration):
    """Arbitrary-precision reference for the closed-form policies."""
    with mpmath.workprec(200):
        if policy.kind == "fixed":
            return float(mpmath.mpf(policy.base_lr))
        if policy.kind == "step":
            e = iteration // policy.step_size
            return float(mpmath.mpf(policy.base_lr) * mpmath.mpf(policy.gamma) ** e)
        return float(mpmath.mpf(policy.base_lr)
                     * (1 + mpmath.mpf(policy.gamma) * iteration)
                     ** (-mpmath.mpf(policy.power)))


def ulp_distance(a, b):
    ia = np.float64(a).view(np.int64)
    ib = np.float64(b).view(np.int64)
    return abs(int(ia) - int(ib))


class TestLrPolicy:
    def test_fixed_is_flat(self):
        p = LrPolicy(kind="fixed", base_lr=0.001)
        assert lr_at(p, 0) == 0.001
        assert lr_at(p, 123456) == 0.001

    def test_step_decade_drops_exact(self):
        p = LrPolicy(kind="step", base_lr=0.001, gamma=0.1, step_size=20000)
        assert lr_at(p, 0) == 0.001
        assert lr_at(p, 19999) == 0.001
        assert lr_at(p, 20000) == 1e-4
        assert lr_at(p, 39999) == 1e-4
        assert lr_at(p, 40000) == 1e-5

    def test_inv_halving_point(self):
        # 1 + gamma*iter == 2 at iter 1e5, so lr == base * 2^-0.75
        p = LrPolicy(kind="inv", base_lr=0.001, gamma=1e-5, power=0.75)
        got = lr_at(p, 100000)
        assert math.isclose(got, 0.001 * 2.0 ** -0.75, rel_tol=1e-15)
        assert ulp_distance(got, mp_lr(p, 100000)) <= 1

    def test_random_parameterizations_within_one_ulp(self, rng):
        for _ in range(300):
            kind = rng.choice(["step", "inv"])
            p = LrPolicy(kind=kind,
                         base_lr=float(10 ** rng.uniform(-5, 0)),
                         gamma=float(10 ** rng.uniform(-6, 0)),
                         step_size=int(rng.integers(100, 50001)),
                         power=float(rng.uniform(0.1, 3.0)))
            it = int(rng.integers(0, 200001))
            assert ulp_distance(lr_at(p, it), mp_lr(p, it)) <= 1

    def test_non_increasing(self):
        for p in (LrPolicy(kind="step", base_lr=0.01, gamma=0.5, step_size=100),
                  LrPolicy(kind="inv", base_lr=0.01, gamma=1e-3, power=0.5)):
            rates = [lr_at(p, it) for it in range(0, 2000, 50)]
            assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_negative_iteration_rejected(self):
        with pytest.raises(SpecValidationError):
            lr_at(LrPolicy(kind="fixed", base_lr=0.1), -1)

    def test_validation(self):
        with pytest.raises(SpecValidationError):
            LrPolicy(kind="cosine", base_lr=0.1)
        with pytest.raises(SpecValidationError):
            LrPolicy(kind="fixed", base_lr=0.0)
        with pytest.raises(SpecValidationError):
            LrPolicy(kind="step", base_lr=0.1, step_size=0)
        with pytest.raises(SpecValidationError):
            LrPolicy(kind="inv", base_lr=0.1, power=0.0)

    def test_default_stage_policies(self):
        p1, p2, p3 = (default_stage_policy(s) for s in (1, 2, 3))
        assert (p1.kind, p1.base_lr) == ("fixed", 0.001)
        assert (p2.kind, p2.base_lr, p2.gamma, p2.step_size) \
            == ("step", 0.001, 0.1, 20000)
        assert (p3.kind, p3.base_lr, p3.gamma, p3.power) \
            == ("inv", 0.001, 1e-5, 0.75)
        with pytest.raises(SpecValidationError):
            default_stage_policy(4)


class TestBatchIndices:
    def test_deterministic(self):
        a = batch_indices(50, 8, shuffle_seed=3, iteration=11)
        b = batch_indices(50, 8, shuffle_seed=3, iteration=11)
        np.testing.assert_array_equal(a, b)

    def test_epoch_covers_every_sample(self):
        n, bs = 20, 6
        batches_per_epoch = -(-n // bs)
        seen = np.concatenate([batch_indices(n, bs, 0, it)
                               for it in range(batches_per_epoch)])
        assert set(seen.tolist()) == set(range(n))

    def test_short_final_batch_wraps(self):
        n, bs = 5, 2
        last = batch_indices(n, bs, shuffle_seed=1, iteration=2)
        assert last.shape == (2,)
        perm = np.concatenate([batch_indices(n, bs, 1, it) for it in range(3)])
        # the wrapped element repeats the head of the same permutation
        assert last[1] == perm[0]

    def test_new_epoch_reshuffles(self):
        first = np.concatenate([batch_indices(16, 4, 0, it) for it in range(4)])
        second = np.concatenate([batch_indices(16, 4, 0, it) for it in range(4, 8)])
        assert not np.array_equal(first, second)
        assert set(first.tolist()) == set(second.tolist()) == set(range(16))


class TestTrainingLog:
    def test_strictly_increasing_enforced(self):
        log = TrainingLog(stage="s")
        log.append(0, 0.1, 1.0)
        log.append(1, 0.1, 0.9)
        with pytest.raises(SpecValidationError):
            log.append(1, 0.1, 0.8)

    def test_csv_round_trip(self, tmp_path):
        log = TrainingLog(stage="s")
        log.append(0, 0.001, 0.123456789123456789)
        log.append(1, 1e-4, 7.5e-3)
        path = tmp_path / "log.csv"
        log.write_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iter", "lr", "loss"]
        assert [int(r[0]) for r in rows[1:]] == [0, 1]
        assert [float(r[2]) for r in rows[1:]] == log.losses


class TestManifestDataset:
    def test_shapes_and_unit_targets(self, overfit_corpus):
        path, manifest = overfit_corpus
        ds = ManifestDataset(path, TINY64)
        assert ds.n == 20
        x, y = ds.batch(np.array([0, 3, 7]))
        assert x.shape == (3, 1, 64, 64) and x.dtype == np.float32
        assert y.shape == (3, 10) and y.dtype == np.float32
        gt = manifest.resolve_landmarks(manifest.entries[0]).points
        np.testing.assert_allclose(y[0], (gt / 64.0).ravel(), atol=1e-6)

    def test_sample_ids(self, overfit_corpus):
        path, _ = overfit_corpus
        ds = ManifestDataset(path, TINY64)
        assert ds.sample_ids([2, 0]) == ["tiny002", "tiny000"]

    def test_landmark_count_mismatch(self, overfit_corpus):
        import dataclasses
        path, _ = overfit_corpus
        with pytest.raises(ShapeMismatchError):
            ManifestDataset(path, dataclasses.replace(TINY64, n_landmarks=7))

    def test_empty_manifest_rejected(self, overfit_corpus):
        import dataclasses
        _, manifest = overfit_corpus
        empty = dataclasses.replace(manifest, entries=[])
        with pytest.raises(ManifestError):
            ManifestDataset(empty, TINY64)


def _schedule(path, tmp_path, **kw):
    defaults = dict(
        name="s1", manifest=path,
        policy=LrPolicy(kind="fixed", base_lr=0.001),
        batch_size=4, max_iterations=3,
        checkpoint_dir=str(tmp_path / "ckpt"))
    defaults.update(kw)
    return StageSchedule(**defaults)


class TestTrainStage:
    def test_three_iterations(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        ws = build_network(TINY64)
        ws, log = train_stage(ws, _schedule(path, tmp_path))
        assert ws.iteration == 3
        assert [r[0] for r in log.records] == [0, 1, 2]
        assert all(r[1] == 0.001 for r in log.records)
        assert all(math.isfinite(l) and l > 0 for l in log.losses)
        final_it, final_path = log.checkpoints[-1]
        assert final_it == 3 and final_path.endswith("s1_final.sdnw")
        back = load_weights(final_path)
        assert back.iteration == 3
        for (_, a), (_, b) in zip(ws.param_arrays(), back.param_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_mid_checkpoints_skip_final_iteration(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        ws = build_network(TINY64)
        _, log = train_stage(ws, _schedule(path, tmp_path, checkpoint_every=1))
        iters = [it for it, _ in log.checkpoints]
        assert iters == [1, 2, 3]
        assert log.checkpoints[0][1].endswith("s1_iter0000001.sdnw")
        assert log.checkpoints[-1][1].endswith("s1_final.sdnw")

    def test_resume_reproduces_straight_run(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        straight = build_network(TINY64)
        straight, slog = train_stage(
            straight, _schedule(path, tmp_path, max_iterations=6,
                                checkpoint_dir=str(tmp_path / "a")))

        half = build_network(TINY64)
        half, hlog1 = train_stage(
            half, _schedule(path, tmp_path, max_iterations=3,
                            checkpoint_dir=str(tmp_path / "b")))
        resumed = load_weights(hlog1.checkpoints[-1][1])
        assert resumed.iteration == 3
        resumed, hlog2 = train_stage(
            resumed, _schedule(path, tmp_path, max_iterations=6,
                               checkpoint_dir=str(tmp_path / "b")))
        assert [r[0] for r in hlog2.records] == [3, 4, 5]
        assert slog.losses[3:] == hlog2.losses
        for (_, a), (_, b) in zip(straight.param_arrays(),
                                  resumed.param_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_finished_stage_is_noop(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        ws = build_network(TINY64)
        ws.iteration = 3
        before = ws.copy()
        ws, log = train_stage(ws, _schedule(path, tmp_path))
        assert log.records == []
        for (_, a), (_, b) in zip(ws.param_arrays(), before.param_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_momentum_changes_trajectory(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        plain = build_network(TINY64)
        plain, _ = train_stage(plain, _schedule(path, tmp_path,
                                                checkpoint_dir=str(tmp_path / "p")))
        heavy = build_network(TINY64)
        heavy, _ = train_stage(heavy, _schedule(path, tmp_path, momentum=0.9,
                                                checkpoint_dir=str(tmp_path / "m")))
        assert not np.array_equal(plain.layers["fc2"].weights,
                                  heavy.layers["fc2"].weights)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_reports_context(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        ws = build_network(TINY64)
        schedule = _schedule(path, tmp_path, max_iterations=50,
                             squared_loss=True,
                             policy=LrPolicy(kind="fixed", base_lr=1e6))
        with pytest.raises(NumericalDivergenceError) as exc:
            train_stage(ws, schedule)
        err = exc.value
        assert err.iteration >= 1
        assert err.lr == 1e6
        assert len(err.batch_ids) == 4
        assert all(b.startswith("tiny") for b in err.batch_ids)

    def test_validation(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        with pytest.raises(SpecValidationError):
            _schedule(path, tmp_path, batch_size=0)
        with pytest.raises(SpecValidationError):
            _schedule(path, tmp_path, momentum=1.0)


class TestRunThreeStage:
    def test_one_iteration_chain(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        s3_out = str(tmp_path / "hard_aug.tsv")
        schedules = [
            _schedule(path, tmp_path, name="stage1", max_iterations=1,
                      checkpoint_dir=str(tmp_path / "c1")),
            _schedule(path, tmp_path, name="stage2", max_iterations=1,
                      checkpoint_dir=str(tmp_path / "c2")),
            _schedule(s3_out, tmp_path, name="stage3", max_iterations=1,
                      checkpoint_dir=str(tmp_path / "c3"),
                      source_manifest=path),
        ]
        ws, logs = run_three_stage(schedules, spec=TINY64)
        assert sorted(logs) == ["stage1", "stage2", "stage3"]
        for name in ("c1", "c2", "c3"):
            assert (tmp_path / name).is_dir()
        assert os.path.exists(s3_out)
        # one barely-trained pass leaves every sample hard, so stage 3 sees
        # the full slight-rotation expansion of the 20 sources
        from sdnface.data import read_manifest
        mined = read_manifest(s3_out, check_files=False)
        assert len(mined.entries) == 22 * 20
        assert ws.iteration == 1

    def test_infinite_threshold_skips_stage3(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        schedules = [
            _schedule(path, tmp_path, name="stage1", max_iterations=1),
            _schedule(path, tmp_path, name="stage2", max_iterations=1),
            _schedule(str(tmp_path / "unused.tsv"), tmp_path, name="stage3",
                      max_iterations=1, source_manifest=path,
                      hard_threshold=float("inf")),
        ]
        _, logs = run_three_stage(schedules, spec=TINY64)
        assert sorted(logs) == ["stage1", "stage2"]
        assert not os.path.exists(tmp_path / "unused.tsv")

    def test_needs_three_schedules(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        with pytest.raises(SpecValidationError):
            run_three_stage([_schedule(path, tmp_path)], spec=TINY64)

    def test_needs_weight_source(self, overfit_corpus, tmp_path):
        path, _ = overfit_corpus
        schedules = [_schedule(path, tmp_path, name=f"stage{i}")
                     for i in (1, 2, 3)]
        with pytest.raises(SpecValidationError):
            run_three_stage(schedules)


class TestStageConfig:
    def test_full_round_trip(self, tmp_path):
        cfg = tmp_path / "train.ini"
        cfg.write_text(
            "[network]\n"
            "n_landmarks = 5\n"
            "input_side = 64\n"
            "fc_hidden = 8\n"
            "seed = 1\n"
            "groups = 3,2,2;3,2,2;3,2,2\n"
            "\n"
            "[stage1]\n"
            "manifest = train.tsv\n"
            "max_iterations = 10\n"
            "batch_size = 4\n"
            "\n"
            "[stage2]\n"
            "manifest = train.tsv\n"
            "policy = step\n"
            "base_lr = 0.002\n"
            "gamma = 0.5\n"
            "step_size = 5\n"
            "momentum = 0.9\n"
            "\n"
            "[stage3]\n"
            "manifest = out.tsv\n"
            "source_manifest = train.tsv\n"
            "hard_threshold = 0.03\n")
        spec, schedules = read_stage_config(cfg)
        assert spec == TINY64
        s1, s2, s3 = schedules
        assert s1.policy == LrPolicy(kind="fixed", base_lr=0.001)
        assert s1.max_iterations == 10 and s1.batch_size == 4
        assert s2.policy == LrPolicy(kind="step", base_lr=0.002, gamma=0.5,
                                     step_size=5)
        assert s2.momentum == 0.9
        assert s2.max_iterations == 60000  # stage default
        assert s3.max_iterations == 20000  # shorter stage-3 default
        assert s3.policy.kind == "inv"
        assert s3.source_manifest == "train.tsv"
        assert s3.hard_threshold == 0.03

    def test_missing_network_section(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[stage1]\nmanifest = x.tsv\n")
        with pytest.raises(SpecValidationError, match="network"):
            read_stage_config(cfg)

    def test_missing_manifest_key(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[network]\nn_landmarks = 5\n[stage1]\nbatch_size = 4\n")
        with pytest.raises(SpecValidationError, match="manifest"):
            read_stage_config(cfg)

    def test_no_stages(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[network]\nn_landmarks = 5\n")
        with pytest.raises(SpecValidationError, match="stage"):
            read_stage_config(cfg)

    def test_unreadable_path(self, tmp_path):
        with pytest.raises(SpecValidationError):
            read_stage_config(tmp_path / "absent.ini")

    def test_bad_groups(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[network]\nn_landmarks = 5\ngroups = 3,2\n"
                       "[stage1]\nmanifest = x.tsv\n")
        with pytest.raises(SpecValidationError, match="group"):
            read_stage_config(cfg)
