import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visimsiam.data import (
    AUG_KINDS,
    MAX_MASK_FRACTION,
    SPLITS,
    AugmentationSpec,
    ConfigError,
    Sample,
    SynthConfig,
    ViewPolicy,
    augment,
    augment_batch,
    generate_dataset,
    load_dataset,
    load_split,
    make_prototypes,
    make_view_batch,
    make_viewset,
    save_dataset,
)

SMALL = SynthConfig(num_classes=4, input_dim=16, samples_per_class=30, seed=3)


def nearest_prototype_hits(ds):
    x = np.concatenate([ds[n].features for n in SPLITS])
    labels = np.concatenate([ds[n].labels for n in SPLITS])
    amb = np.concatenate([ds[n].ambiguous for n in SPLITS])
    return np.argmax(x @ ds.prototypes.T, axis=1) == labels, amb


def test_generation_is_deterministic():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    for n in SPLITS:
        assert np.array_equal(a[n].features, b[n].features)
        assert np.array_equal(a[n].partner, b[n].partner)
    c = generate_dataset(SynthConfig(num_classes=4, input_dim=16, samples_per_class=30, seed=4))
    assert not np.array_equal(a["train"].features, c["train"].features)


def test_split_sizes_and_label_balance():
    ds = generate_dataset(SMALL)
    sizes = {n: len(ds[n]) for n in SPLITS}
    assert sizes == {"train": 4 * 21, "val": 4 * 3, "test": 4 * 6}
    for n in SPLITS:
        assert len(set(np.bincount(ds[n].labels, minlength=4))) == 1


def test_ambiguous_count_and_partner():
    cfg = SynthConfig(num_classes=5, input_dim=16, samples_per_class=33, ambiguity_fraction=0.25, seed=1)
    assert cfg.ambiguous_per_class == 8
    ds = generate_dataset(cfg)
    amb = sum(int(ds[n].ambiguous.sum()) for n in SPLITS)
    assert amb == 5 * 8
    for n in SPLITS:
        s = ds[n]
        assert np.all((s.partner >= 0) == s.ambiguous)
        assert np.all(s.partner[s.ambiguous] != s.labels[s.ambiguous])


def test_prototypes_well_separated():
    ds = generate_dataset(SynthConfig())
    g = ds.prototypes @ ds.prototypes.T
    np.testing.assert_allclose(np.diag(g), 1.0, atol=1e-12)
    assert np.all(g[~np.eye(10, dtype=bool)] < 0.5)


def test_noiseless_clean_data_is_perfectly_separable():
    ds = generate_dataset(SynthConfig(noise_scale=0.0, ambiguity_fraction=0.0))
    hits, _ = nearest_prototype_hits(ds)
    assert hits.all()


def test_half_mix_is_equidistant():
    p = make_prototypes(3, 16, np.random.default_rng(0))
    c = 0.5 * p[0] + 0.5 * p[1]
    c /= np.linalg.norm(c)
    assert c @ p[0] == pytest.approx(c @ p[1], abs=1e-14)


def test_default_generator_nearest_prototype_rates():
    ds = generate_dataset(SynthConfig(noise_scale=0.1))
    hits, amb = nearest_prototype_hits(ds)
    assert hits[~amb].mean() > 0.99
    # regression value measured on the first run of this generator
    assert hits[amb].mean() == pytest.approx(0.965, abs=1e-12)
    assert hits[amb].mean() < hits[~amb].mean()


@pytest.mark.xfail(strict=True, reason="a 0.6/0.4 mix stays ~1.5-2 noise sd from the boundary at sigma 0.1")
def test_ambiguous_nearest_prototype_rate_below_ninety_percent():
    hits, amb = nearest_prototype_hits(generate_dataset(SynthConfig(noise_scale=0.1)))
    assert hits[amb].mean() < 0.90


@pytest.mark.parametrize(
    "kw",
    [
        {"num_classes": 1},
        {"ambiguity_mix": 0.5},
        {"ambiguity_mix": 0.3},
        {"ambiguity_fraction": 1.5},
        {"noise_scale": -0.1},
        {"input_dim": 4},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


def test_mix_below_half_allowed_without_ambiguity():
    SynthConfig(ambiguity_fraction=0.0, ambiguity_mix=0.3)


def test_too_many_prototypes_is_a_config_error():
    with pytest.raises(ConfigError, match="prototypes"):
        generate_dataset(SynthConfig(num_classes=200, input_dim=8, samples_per_class=1))


def test_sample_invariant():
    with pytest.raises(ValueError):
        Sample(np.zeros(3), 0, ambiguous=True)
    with pytest.raises(ValueError):
        Sample(np.zeros(3), 0, mix_partner=2)
    ds = generate_dataset(SMALL)
    s = ds["train"].sample(0)
    assert s.ambiguous == (s.mix_partner is not None)


def test_serialization_round_trip(tmp_path):
    ds = generate_dataset(SMALL)
    paths = save_dataset(ds, tmp_path)
    assert sorted(p.name for p in paths) == sorted(f"{n}.{e}" for n in SPLITS for e in ("bin", "csv"))
    back = load_dataset(tmp_path)
    assert back.config == ds.config
    assert np.array_equal(back.prototypes, ds.prototypes)
    for n in SPLITS:
        for f in ("features", "labels", "ambiguous", "partner"):
            assert np.array_equal(getattr(back[n], f), getattr(ds[n], f))
    rows = (tmp_path / "train.csv").read_text().splitlines()
    assert len(rows) == len(ds["train"]) + 1
    first = rows[1].split(",")
    assert float(first[3]) == ds["train"].features[0, 0]


def test_load_rejects_bad_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!" * 4)
    with pytest.raises(ConfigError, match="not a dataset"):
        load_split(tmp_path / "x.bin")


# augmentations


def test_mask_count_at_full_severity():
    x = np.ones((50, 64))
    out = augment_batch(x, "mask", np.ones(50), np.random.default_rng(0))
    assert math.floor(MAX_MASK_FRACTION * 64) == 60
    np.testing.assert_array_equal((out == 0).sum(axis=1), 60)
    # the masked span is contiguous
    for row in out:
        z = np.flatnonzero(row == 0)
        assert z[-1] - z[0] == 59


@pytest.mark.parametrize("kind", AUG_KINDS)
def test_zero_severity_is_identity(kind):
    x = np.random.default_rng(1).standard_normal((7, 16))
    assert np.array_equal(augment_batch(x, kind, np.zeros(7), np.random.default_rng(2)), x)


@pytest.mark.parametrize("kind", AUG_KINDS)
def test_augment_deterministic_and_non_mutating(kind):
    x = np.random.default_rng(1).standard_normal(16)
    keep = x.copy()
    spec = AugmentationSpec(kind, 0.7)
    a = augment(x, spec, np.random.default_rng(5))
    b = augment(x, spec, np.random.default_rng(5))
    assert np.array_equal(a, b) and np.array_equal(x, keep)


def test_coordinate_flip_is_a_permutation():
    x = np.arange(16.0)[None, :].repeat(4, axis=0)
    out = augment_batch(x, "coordinate-flip", np.ones(4), np.random.default_rng(0))
    np.testing.assert_array_equal(out, x[:, ::-1])
    out = augment_batch(x, "coordinate-flip", np.full(4, 0.5), np.random.default_rng(0))
    assert all(sorted(r) == list(range(16)) for r in out)
    # each moved coordinate lands on its mirror position
    moved = out != x
    assert np.all(out[moved] == (15 - x)[moved])
    assert np.all(moved.sum(axis=1) == 8)


def test_channel_drop_zeroes_first_block():
    x = np.ones((2, 16))
    out = augment_batch(x, "channel-drop", np.ones(2), np.random.default_rng(0))
    assert np.all(out[:, :2] == 0) and np.all(out[:, 2:] == 1)


def test_noise_scale_matches_severity():
    x = np.zeros((4000, 16))
    out = augment_batch(x, "noise", np.full(4000, 0.5), np.random.default_rng(0), noise_scale=0.4)
    assert out.std() == pytest.approx(0.2, rel=0.02)


def test_scale_jitter_bounds():
    x = np.ones((100, 16))
    out = augment_batch(x, "scale-jitter", np.full(100, 0.3), np.random.default_rng(0))
    assert out.min() >= 0.7 and out.max() <= 1.3


@pytest.mark.parametrize("kw", [{"kind": "blur", "severity": 0.5}, {"kind": "mask", "severity": 1.5}])
def test_augmentation_spec_validation(kw):
    with pytest.raises(ValueError):
        AugmentationSpec(**kw)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(8, 96), st.integers(0, 1000))
def test_mask_fraction_property(sev, dim, seed):
    out = augment_batch(np.ones((3, dim)), "mask", np.full(3, sev), np.random.default_rng(seed))
    expected = math.floor(sev * MAX_MASK_FRACTION * dim + 1e-9)
    assert np.all((out == 0).sum(axis=1) == expected)


def test_eight_views_two_standard_six_heavy():
    x = np.random.default_rng(0).standard_normal((10, 64))
    policy = ViewPolicy()
    vb = make_view_batch(x, 8, policy, np.random.default_rng(1))
    assert vb.num_views == 8
    for v in range(8):
        sev = vb.severity[v]["mask"]
        if v < 2:
            assert np.all(sev <= policy.standard_max)
        else:
            assert vb.applied[v]["mask"].all()
            assert np.all((sev >= policy.heavy_min) & (sev <= policy.heavy_max))


def test_view_batch_deterministic_and_specs():
    x = np.random.default_rng(0).standard_normal((5, 16))
    a = make_view_batch(x, 3, None, np.random.default_rng(9))
    b = make_view_batch(x, 3, None, np.random.default_rng(9))
    assert all(np.array_equal(u, v) for u, v in zip(a.views, b.views))
    specs = a.specs(2, 0)
    assert any(s.kind == "mask" for s in specs)
    with pytest.raises(ValueError):
        make_view_batch(x, 1, None, np.random.default_rng(0))


def test_viewset_provenance():
    ds = generate_dataset(SMALL)
    vs = make_viewset(ds["train"].sample(3), 4, None, np.random.default_rng(0))
    assert len(vs.views) == len(vs.specs) == 4
    assert vs.source.label == ds["train"].labels[3]
