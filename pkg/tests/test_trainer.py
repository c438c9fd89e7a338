import shutil
from dataclasses import replace

import numpy as np
import pytest

from mfhi import trainer as tr
from mfhi.dataset import ConfigurationError, SyntheticConfig, generate_synthetic, load_dataset
from mfhi.trainer import (
    Adam,
    TrainConfig,
    TrainData,
    TrainingAbort,
    build_model,
    episode_losses,
    fit,
    load_checkpoint,
    read_log,
    sample_episode,
    save_checkpoint,
    train_step,
)

SMALL = dict(num_train_identities=8, num_test_identities=3, num_attributes=6, channels=8, height=4, width=4,
             images_per_identity=4, probes_per_identity=1)
FAST = dict(n_way=4, shots=2, top_d=3)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_synthetic(SyntheticConfig(**SMALL), root)
    return load_dataset(root)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def toy_data(k=20, per=3):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(k), per)
    return TrainData(
        features=rng.normal(size=(k * per, 2, 2, 2)).astype(np.float32),
        attributes=rng.integers(0, 2, size=(k * per, 3)).astype(np.float32),
        labels=labels,
        classes=np.arange(k),
        class_vectors=rng.uniform(size=(k, 3)).astype(np.float32),
        members=[np.flatnonzero(labels == c) for c in range(k)],
        identities=list(range(k)),
    )


# -- episodes -----------------------------------------------------------------------


def test_full_draw_covers_every_class_once():
    data = toy_data(k=6)
    ep = sample_episode(data, TrainConfig(n_way=6, shots=2), np.random.default_rng(1))
    assert sorted(ep.class_rows.tolist()) == list(range(6))
    assert sorted(ep.labels.tolist()) == sorted([0, 1, 2, 3, 4, 5] * 2)


def test_episode_sequence_is_seeded():
    data, cfg = toy_data(), TrainConfig(n_way=5, shots=2)
    a = [sample_episode(data, cfg, np.random.default_rng(7)).class_rows.tolist() for _ in range(1)]
    b = [sample_episode(data, cfg, np.random.default_rng(7)).class_rows.tolist() for _ in range(1)]
    assert a == b


def test_class_frequency_matches_uniform_draw():
    data, cfg = toy_data(k=20), TrainConfig(n_way=5, shots=1)
    rng = np.random.default_rng(2)
    counts = np.zeros(20)
    for _ in range(1000):
        counts[sample_episode(data, cfg, rng).class_rows] += 1
    p = 5 / 20
    mean, sd = 1000 * p, np.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - mean) <= 4 * sd)


def test_labels_are_a_bijection_onto_episode_slots():
    data = toy_data()
    ep = sample_episode(data, TrainConfig(n_way=5, shots=3), np.random.default_rng(3))
    assert set(ep.labels.tolist()) == set(range(5))
    for local, row in enumerate(ep.class_rows):
        np.testing.assert_array_equal(ep.category[local], data.class_vectors[row])


def test_shots_without_replacement_when_possible():
    data = toy_data(k=5, per=3)
    ep = sample_episode(data, TrainConfig(n_way=5, shots=3), np.random.default_rng(4))
    feats = ep.features.reshape(15, -1)
    assert len({f.tobytes() for f in feats}) == 15
    # fewer images than shots: replacement kicks in instead of failing
    ep = sample_episode(data, TrainConfig(n_way=2, shots=5), np.random.default_rng(5))
    assert ep.labels.size == 10


def test_impossible_episode():
    with pytest.raises(ConfigurationError):
        sample_episode(toy_data(k=3), TrainConfig(n_way=4), np.random.default_rng(0))


def test_episodes_only_use_training_identities(small_ds):
    data = TrainData.from_dataset(small_ds)
    assert set(data.identities) == set(small_ds.manifest.train_identities)
    test_ids = set(small_ds.manifest.test_identities)
    assert not test_ids & set(data.classes.tolist())


# -- optimizer ----------------------------------------------------------------------


def test_adam_first_step_matches_reference():
    from mfhi.autodiff import Tensor

    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True), "bias": Tensor(np.array([0.5]), requires_grad=True)}
    p["w"].grad = np.array([0.1, -0.3])
    p["bias"].grad = np.array([2.0])
    opt = Adam(p, lr=0.01, weight_decay=0.1)
    opt.step(p)
    # bias-corrected first step moves each coordinate by lr * sign(g); decay hits weights only
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.001) - 0.01 * np.sign([0.1, -0.3]), rtol=1e-6)
    np.testing.assert_allclose(p["bias"].data, [0.5 - 0.01], rtol=1e-6)
    assert opt.step_count == 1 and opt.m["w"].shape == (2,)


def test_zero_learning_rate_keeps_parameters(small_ds):
    cfg = TrainConfig(lr=0.0, **FAST)
    data = TrainData.from_dataset(small_ds)
    init_rng, rng = np.random.default_rng(0), np.random.default_rng(1)
    model = build_model(data, small_ds.feature_shape, cfg, init_rng)
    before = {k: v.data.copy() for k, v in model.params.items()}
    opt = Adam(model.params, 0.0, weight_decay=cfg.weight_decay)
    res = train_step(model, opt, sample_episode(data, cfg, rng), cfg)
    assert np.isfinite(res.total) and res.total == pytest.approx(res.cea + res.dcm, rel=1e-6)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_single_step_decreases_loss(small_ds):
    cfg = TrainConfig(lr=1e-3, **FAST)
    data = TrainData.from_dataset(small_ds)
    model = build_model(data, small_ds.feature_shape, cfg, np.random.default_rng(0))
    ep = sample_episode(data, cfg, np.random.default_rng(1))
    opt = Adam(model.params, cfg.lr, weight_decay=cfg.weight_decay)
    before = train_step(model, opt, ep, cfg).total
    after = episode_losses(model, ep, cfg)[0].item()
    assert after < before


def test_fifty_steps_are_bitwise_reproducible(small_ds):
    def run():
        cfg = TrainConfig(**FAST)
        data = TrainData.from_dataset(small_ds)
        model = build_model(data, small_ds.feature_shape, cfg, np.random.default_rng(0))
        opt = Adam(model.params, cfg.lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(1)
        for _ in range(50):
            train_step(model, opt, sample_episode(data, cfg, rng), cfg)
        return {k: v.data.tobytes() for k, v in model.params.items()}

    assert run() == run()


def test_non_finite_loss_aborts_with_stage(small_ds):
    cfg = TrainConfig(**FAST)
    data = TrainData.from_dataset(small_ds)
    model = build_model(data, small_ds.feature_shape, cfg, np.random.default_rng(0))
    model.params["apm.weight"].data[:] = 1e38
    opt = Adam(model.params, cfg.lr)
    with pytest.raises(TrainingAbort, match="embedding at step 0"):
        train_step(model, opt, sample_episode(data, cfg, np.random.default_rng(1)), cfg)


# -- fit and checkpoints ------------------------------------------------------------------


def test_zero_episodes_writes_initial_checkpoint(small_ds, tmp_path):
    ckpt = fit(small_ds, TrainConfig(episodes=0, **FAST), tmp_path)
    assert ckpt.episode == 0 and ckpt.optimizer.step_count == 0
    assert (tmp_path / "checkpoint" / "checkpoint.json").is_file()
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert lines[0].startswith("# config_hash ") and lines[1] == tr.LOG_HEADER and len(lines) == 2


def test_log_has_one_line_per_episode(small_ds, tmp_path):
    ckpt = fit(small_ds, TrainConfig(episodes=7, **FAST), tmp_path)
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert len(lines) == 7 + tr.LOG_HEADER_LINES
    assert ckpt.config_hash in lines[0]
    rows = read_log(tmp_path / "train_log.tsv")
    assert [r["episode"] for r in rows] == list(range(1, 8))
    assert all(r["total"] == pytest.approx(r["cea"] + r["dcm"], rel=1e-5) for r in rows)


def test_training_curve_goes_down(tmp_path):
    generate_synthetic(SyntheticConfig(), tmp_path / "data")
    ds = load_dataset(tmp_path / "data")
    fit(ds, TrainConfig(episodes=400), tmp_path / "run")
    totals = [r["total"] for r in read_log(tmp_path / "run" / "train_log.tsv")]
    assert np.mean(totals[-100:]) < np.mean(totals[:100])


def test_save_load_save_is_byte_identical(small_ds, tmp_path):
    ckpt = fit(small_ds, TrainConfig(episodes=5, **FAST), tmp_path / "run")
    loaded = load_checkpoint(tmp_path / "run" / "checkpoint")
    save_checkpoint(tmp_path / "again", loaded)
    assert tree_bytes(tmp_path / "run" / "checkpoint") == tree_bytes(tmp_path / "again")
    assert loaded.meta["train_identities"] == small_ds.manifest.train_identities
    assert loaded.config == ckpt.config


def test_resume_reproduces_uninterrupted_run(small_ds, tmp_path, monkeypatch):
    cfg = TrainConfig(episodes=20, checkpoint_every=10, **FAST)
    fit(small_ds, cfg, tmp_path / "full")

    calls = {"n": 0}
    real_step = tr.train_step

    def crashing_step(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 15:
            raise KeyboardInterrupt
        return real_step(*args, **kw)

    monkeypatch.setattr(tr, "train_step", crashing_step)
    with pytest.raises(KeyboardInterrupt):
        fit(small_ds, cfg, tmp_path / "cut")
    monkeypatch.setattr(tr, "train_step", real_step)
    fit(small_ds, cfg, tmp_path / "cut", resume_from=tmp_path / "cut" / "checkpoints" / "ep000010")

    assert tree_bytes(tmp_path / "full" / "checkpoint") == tree_bytes(tmp_path / "cut" / "checkpoint")
    assert (tmp_path / "full" / "train_log.tsv").read_bytes() == (tmp_path / "cut" / "train_log.tsv").read_bytes()


def test_resume_rejects_changed_config(small_ds, tmp_path):
    cfg = TrainConfig(episodes=2, **FAST)
    fit(small_ds, cfg, tmp_path)
    with pytest.raises(ConfigurationError):
        fit(small_ds, replace(cfg, lr=0.5), tmp_path, resume_from=tmp_path / "checkpoint")


def test_fc_prototype_mode_trains(small_ds, tmp_path):
    ckpt = fit(small_ds, TrainConfig(mode="i2i", episodes=3, **FAST), tmp_path)
    assert ckpt.model.params["fc.weight"].shape == (8, 8)
    assert "plm.w1" not in ckpt.model.params


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"episodes": 3, "learning_rate": 0.1})
    with pytest.raises(ConfigurationError):
        TrainConfig(d=2.0)


def test_top_d_larger_than_attribute_count(small_ds, tmp_path):
    with pytest.raises(ConfigurationError):
        fit(small_ds, TrainConfig(episodes=1, n_way=4, shots=2, top_d=7), tmp_path)


def test_checkpoint_dir_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


def test_checkpoint_copy_still_loads(small_ds, tmp_path):
    fit(small_ds, TrainConfig(episodes=1, **FAST), tmp_path / "run")
    shutil.copytree(tmp_path / "run" / "checkpoint", tmp_path / "copy")
    assert load_checkpoint(tmp_path / "copy").episode == 1
