import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from jointmae.dims import FULL, TINY
from jointmae.embedding import EMBED_2D_CALLS
from jointmae.engine import backward, checkpoint
from jointmae.geometry import random_rotation, read_pgm, read_points
from jointmae.pipeline.ablate import arms, run_ablation
from jointmae.pipeline.config import DatasetSpec, RunConfig, preset_config
from jointmae.pipeline.data import make_shape, sample_surface, synth_dataset
from jointmae.pipeline.model import forward, init_model, make_batch
from jointmae.pipeline.probe import extract_features, fit_linear_probe, linear_probe, probe_objective
from jointmae.pipeline.reconstruct import reconstruct, unpatchify, write_reconstruction
from jointmae.pipeline.report import plot_loss_curves
from jointmae.pipeline.train import TrainingAborted, load_checkpoint, pretrain, read_log


def tiny_cfg(tmp_path, **kw):
    return replace(preset_config("tiny"), out_dir=str(tmp_path), **kw)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = tiny_cfg(out)
    return cfg, pretrain(cfg)


class TestData:
    def test_sphere_radius_one(self):
        pts = sample_surface("sphere", 500, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)

    def test_split_sizes(self):
        train, test = synth_dataset(DatasetSpec(), 0, 16)
        assert (len(train), len(test)) == (300, 100)
        assert np.bincount([c.label for c in train]).tolist() == [60] * 5

    def test_deterministic(self):
        spec = DatasetSpec(train_per_class=2, test_per_class=1)
        a, b = synth_dataset(spec, 3, 64), synth_dataset(spec, 3, 64)
        assert all(np.array_equal(x.points, y.points) for x, y in zip(a[0] + a[1], b[0] + b[1]))

    def test_splits_disjoint(self):
        train, test = synth_dataset(DatasetSpec(train_per_class=3, test_per_class=3), 0, 32)
        assert not any(np.array_equal(x.points, y.points) for x in train for y in test)

    @pytest.mark.parametrize("kind", ["sphere", "cube", "cylinder", "torus", "cone"])
    def test_normalized(self, kind):
        pts, _ = make_shape(kind, 256, DatasetSpec(), 1)
        assert np.abs(pts).max() == pytest.approx(1.0) and np.allclose(pts.mean(axis=0), 0.0, atol=1e-12)

    def test_upright_keeps_z_axis(self):
        flat = DatasetSpec(rotate="none", deform=0.0, noise=0.0)
        a, _ = make_shape("cone", 256, flat, 5)
        b, _ = make_shape("cone", 256, replace(flat, rotate="upright"), 5)
        np.testing.assert_allclose(a[:, 2], b[:, 2], atol=1e-12)

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            DatasetSpec(classes=("sphere", "pyramid"))
        with pytest.raises(ValueError):
            sample_surface("pyramid", 4, np.random.default_rng(0))


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = RunConfig(mask_ratio=0.6, scheme=("global", "local"))
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg

    def test_partial_file_uses_preset(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"preset": "tiny", "epochs": 3}))
        cfg = RunConfig.load(tmp_path / "c.json")
        assert cfg.dims == TINY and cfg.epochs == 3

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"learning_rate": 1.0})
        with pytest.raises(ValueError):
            RunConfig.from_dict({"dims": {"depth": 3}})

    @pytest.mark.parametrize("bad", [{"mask_ratio": 1.0}, {"scheme": ("local", "wide")}, {"cross_views": 0},
                                     {"sigma": 0.0}, {"warmup_epochs": 50}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            RunConfig(**bad)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset_config("huge")


class TestTraining:
    def test_log_rows_and_totals(self, tiny_run):
        cfg, res = tiny_run
        rows = read_log(res.log)
        assert [r["epoch"] for r in rows] == list(range(1, cfg.epochs + 1))
        for r in rows:
            assert r["total"] == pytest.approx(r["l3d"] + r["l2d"] + r["lcross"], rel=1e-12)

    def test_checkpoints_written(self, tiny_run):
        cfg, res = tiny_run
        out = res.checkpoint.parent
        assert (out / "epoch_0001.jmae").exists() and (out / "epoch_0002.jmae").exists()
        _, _, saved, epoch = load_checkpoint(res.checkpoint)
        assert saved == cfg and epoch == cfg.epochs

    def test_byte_identical_reruns(self, tiny_run, tmp_path):
        cfg, res = tiny_run
        again = pretrain(replace(cfg, out_dir=str(tmp_path)))
        assert again.checkpoint.read_bytes() == res.checkpoint.read_bytes()
        assert again.log.read_bytes() == res.log.read_bytes()

    def test_resume_reproduces_next_epoch(self, tiny_run, tmp_path):
        cfg, res = tiny_run
        # continue the 2-epoch run from its own epoch-1 checkpoint
        resumed = pretrain(replace(cfg, out_dir=str(tmp_path / "resumed")),
                           resume=res.checkpoint.parent / "epoch_0001.jmae")
        assert resumed.rows[-1] == read_log(res.log)[-1]
        assert resumed.checkpoint.read_bytes() == res.checkpoint.read_bytes()

    def test_resume_dims_mismatch(self, tiny_run, tmp_path):
        _, res = tiny_run
        with pytest.raises(checkpoint.CheckpointError):
            pretrain(RunConfig(out_dir=str(tmp_path)), resume=res.checkpoint)

    def test_non_finite_aborts(self, tmp_path):
        cfg = tiny_cfg(tmp_path, lr=1e300, grad_clip=0.0, epochs=3, warmup_epochs=0.0)
        with np.errstate(all="ignore"), pytest.raises(TrainingAborted):
            pretrain(cfg)

    def test_full_scale_one_iteration(self):
        cfg = preset_config("full")
        cloud, _ = make_shape("torus", FULL.n_points, cfg.dataset, 0)
        tree = init_model(FULL, 0)
        res = forward(tree, make_batch(cloud[None], [0], 0, cfg), cfg)
        backward(res.loss.tensor)
        assert np.isfinite(res.loss.total) and res.pred2.shape == (1, 147, 256)


@pytest.fixture(scope="module")
def setup():
    return init_model(TINY, 0), make_shape("cube", TINY.n_points, DatasetSpec(), 2)[0]


class TestFeatures:
    def test_length_and_repeatable(self, setup):
        tree, cloud = setup
        a, b = extract_features(tree, TINY, cloud), extract_features(tree, TINY, cloud.copy())
        assert a.shape == (TINY.width_c,) and np.array_equal(a, b)

    def test_rotation_changes_feature(self, setup):
        tree, cloud = setup
        rot = cloud @ random_rotation(np.random.default_rng(1)).T
        assert not np.allclose(extract_features(tree, TINY, cloud), extract_features(tree, TINY, rot))

    def test_2d_branch_untouched(self, setup):
        tree, cloud = setup
        before = EMBED_2D_CALLS["count"]
        extract_features(tree, TINY, np.stack([cloud, cloud]))
        assert EMBED_2D_CALLS["count"] == before

    def test_point_count_mismatch(self, setup):
        tree, cloud = setup
        with pytest.raises(ValueError):
            extract_features(tree, TINY, cloud[:10])


class TestLinearProbe:
    def test_separable(self, rng):
        x = np.concatenate([rng.normal(-3, 1, (40, 5)), rng.normal(3, 1, (40, 5))])
        y = np.repeat([0, 1], 40)
        assert linear_probe(x, y, x, y) == 1.0

    def test_shuffled_labels_near_chance(self):
        accs = []
        for s in range(5):
            rng = np.random.default_rng(s)
            x = rng.normal(size=(300, 16))
            y = rng.integers(5, size=300)
            accs.append(linear_probe(x[:200], rng.permutation(y[:200]), x[200:], y[200:]))
        assert abs(np.mean(accs) - 0.2) <= 0.10

    def test_matches_convex_solver(self, rng):
        x = rng.normal(size=(20, 4)) + np.repeat(np.eye(4)[:2] * 1.5, 10, axis=0)
        y = np.repeat([0, 1], 10)
        clf = fit_linear_probe(x, y, reg=1e-2)
        X = clf._design(x)
        Y = np.where(y[:, None] == clf.classes[None], 1.0, -1.0)
        shape = clf.weight.shape
        sol = minimize(lambda w: probe_objective(w.reshape(shape), X, Y, 1e-2)[0], np.zeros(clf.weight.size),
                       jac=lambda w: probe_objective(w.reshape(shape), X, Y, 1e-2)[1].ravel(), method="BFGS",
                       options={"gtol": 1e-10})
        oracle = clf.classes[np.argmax(X @ sol.x.reshape(shape), axis=1)]
        assert np.sum(oracle != clf.predict(x)) <= 1
        assert probe_objective(clf.weight, X, Y, 1e-2)[0] == pytest.approx(sol.fun, rel=1e-6)

    def test_converges(self, rng):
        clf = fit_linear_probe(rng.normal(size=(30, 3)), rng.integers(3, size=30))
        assert clf.grad_norm < 1e-6 or clf.iterations == 10_000

    def test_single_class(self):
        with pytest.raises(ValueError):
            fit_linear_probe(np.zeros((4, 2)), np.zeros(4))


class TestReconstruct:
    def test_dump(self, tiny_run, tmp_path):
        _, res = tiny_run
        tree, _, cfg, _ = load_checkpoint(res.checkpoint)
        cloud, _ = make_shape("torus", 300, cfg.dataset, 0)
        rec = reconstruct(tree, cfg, cloud)
        n_masked = int(round(cfg.mask_ratio * TINY.g2))
        assert rec.predicted.shape == (n_masked * TINY.points_per_group, 3)
        assert len(rec.visible) < TINY.n_points
        files = write_reconstruction(rec, tmp_path)
        assert len(files) == 7
        assert read_points(tmp_path / "centers.xyz").shape == (TINY.g2, 3)
        assert read_pgm(tmp_path / "depth_input.pgm").shape == (TINY.height, TINY.width)

    def test_unpatchify_inverts_patchify(self):
        from jointmae.embedding import patchify
        m = np.arange(64.0).reshape(8, 8)
        assert np.array_equal(unpatchify(patchify(m[None], 4).reshape(4, 16), (2, 2), 4), m)


class TestAblation:
    def test_axes_arms(self):
        assert [a for a, _ in arms("views")] == ["no cross loss", "1 view", "4 views"]
        assert [o["mask_ratio"] for _, o in arms("ratio")] == [0.6, 0.7, 0.75, 0.8]
        assert len(arms("attention")) == 4
        with pytest.raises(ValueError):
            arms("depth")

    def test_views_csv(self, tmp_path):
        base = tiny_cfg(tmp_path, epochs=1, warmup_epochs=0.0)
        rows = run_ablation("views", base, tmp_path / "views.csv")
        with open(tmp_path / "views.csv") as fh:
            got = list(csv.DictReader(fh))
        assert [r["arm"] for r in got] == [r["arm"] for r in rows] and len(got) == 3
        assert all(0.0 <= float(r["probe_accuracy"]) <= 1.0 for r in got)


def test_loss_curve_figure(tiny_run, tmp_path):
    _, res = tiny_run
    path = plot_loss_curves(read_log(res.log), tmp_path / "loss.png")
    assert path.stat().st_size > 0
