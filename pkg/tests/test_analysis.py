import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import tiny_config
from ivtune import analysis as an
from ivtune.backbone import VARIANTS, ModelConfig
from ivtune.dataset import generate
from ivtune.model import IVModel, parameter_groups


# -- PCA ------------------------------------------------------------------------

def test_rank_one_tokens():
    r = an.explained_variance_ratios([[1, 0], [-1, 0], [0, 0]])
    np.testing.assert_allclose(r, [1.0, 0.0], atol=1e-15)


def test_hand_covariance_ratios():
    r = an.explained_variance_ratios([[2, 0], [-2, 0], [0, 1], [0, -1]])
    np.testing.assert_allclose(r, [0.8, 0.2], rtol=1e-14)


def test_isotropic_gaussian():
    x = np.random.default_rng(0).standard_normal((10000, 2))
    r = an.explained_variance_ratios(x)
    assert all(abs(v - 0.5) <= 0.05 for v in r)


def test_identical_tokens_degenerate():
    with pytest.raises(an.DegenerateInputError):
        an.explained_variance_ratios(np.ones((5, 3)))
    with pytest.raises(ValueError):
        an.explained_variance_ratios(np.ones((1, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_pca_matches_jacobi_oracle(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 9))
    x = rng.normal(size=(30, c)) @ rng.normal(size=(c, c))
    np.testing.assert_allclose(an.explained_variance_ratios(x), oracles.pca_ratios(x),
                               rtol=0, atol=1e-9)


@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_pca_invariances(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, c)) * rng.uniform(0.5, 3, size=c)
    base = an.explained_variance_ratios(x)
    np.testing.assert_allclose(an.explained_variance_ratios(x[rng.permutation(20)]), base,
                               atol=1e-12)
    np.testing.assert_allclose(an.explained_variance_ratios(x + rng.normal(size=c) * 10), base,
                               atol=1e-9)
    assert np.all(np.diff(base) <= 1e-15)
    assert base.sum() == pytest.approx(1.0, abs=1e-12)


def test_layer_report_top_k():
    feats = [np.random.default_rng(i).normal(size=(2, 9, 6)) for i in range(3)]
    rep = an.pca_layer_report(feats, k=5)
    assert sorted(rep.ratios) == [0, 1, 2]
    assert all(len(r) == 5 and r.sum() <= 1 + 1e-12 for r in rep.ratios.values())
    assert rep.top1(1) == rep.ratios[1][0]


def test_capture_features_well_defined_on_fresh_model():
    model = IVModel(tiny_config(image_size=16))
    split = generate(0, 10, image_size=16)
    feats = an.capture_layer_features(model, split, n_probe=8, seed=0)
    assert len(feats) == model.config.depth
    assert feats[0].shape == (8, 16, 8)
    rep = an.pca_layer_report(feats)
    assert all(np.isfinite(r).all() for r in rep.ratios.values())
    again = an.capture_layer_features(model, split, n_probe=8, seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(feats, again))


# -- radial energy --------------------------------------------------------------------

def test_constant_image_all_in_band_zero():
    rep = an.radial_energy(np.full((8, 8), 3.0), bands=4)
    np.testing.assert_allclose(rep.energy, [1, 0, 0, 0], atol=1e-15)


def test_nyquist_cosine_lands_in_expected_band():
    h = w = 8
    img = np.cos(np.pi * np.arange(w))[None, :].repeat(h, axis=0)
    rep = an.radial_energy(img, bands=4)
    ref = oracles.radial_bands(img, 4)
    np.testing.assert_allclose(rep.energy, ref, atol=1e-9)
    # Nyquist along one axis sits at radius (1/2) / (corner radius sqrt(2)/2) = 0.707
    assert int(np.argmax(rep.energy)) == 2 and rep.energy[2] == pytest.approx(1.0)


@pytest.mark.parametrize("shape", [(4, 4), (5, 7), (8, 6), (16, 16), (3, 16, 16), (2, 9, 10)])
def test_radial_matches_naive_dft(shape):
    img = np.random.default_rng(sum(shape)).normal(size=shape)
    bands = min(4, an.max_bands(*shape[-2:]))
    np.testing.assert_allclose(an.radial_energy(img, bands).energy,
                               oracles.radial_bands(img, bands), atol=1e-9)


def test_radial_sums_to_one_on_100_inputs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = rng.integers(2, 20, size=2)
        bands = int(rng.integers(1, an.max_bands(h, w) + 1))
        e = an.radial_energy(rng.normal(size=(h, w)), bands).energy
        assert abs(e.sum() - 1) <= 1e-9 and (e >= 0).all()


@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
def test_radial_scale_invariant(seed, c):
    img = np.random.default_rng(seed).normal(size=(8, 8))
    np.testing.assert_allclose(an.radial_energy(c * img, 4).energy,
                               an.radial_energy(img, 4).energy, rtol=1e-10, atol=1e-13)


def test_radial_errors():
    with pytest.raises(ValueError):
        an.radial_energy(np.ones((8, 8)), bands=0)
    with pytest.raises(ValueError):
        an.radial_energy(np.ones((8, 8)), bands=an.max_bands(8, 8) + 1)
    with pytest.raises(ValueError):
        an.radial_energy(np.ones((1, 8)), bands=1)
    with pytest.raises(an.DegenerateInputError):
        an.radial_energy(np.zeros((8, 8)), bands=2)


# -- operator shift ------------------------------------------------------------------------

def _images():
    return generate(0, 4, image_size=16).ir[:, 0]


def test_identity_projection_leaves_tables_equal():
    res = an.operator_spectrum_shift(_images(), "linear_projection", np.eye(16), bands=4)
    np.testing.assert_allclose(res.after, res.before, atol=1e-15)


def test_delta_kernel_leaves_tables_equal():
    k = np.zeros((3, 3))
    k[1, 1] = 1
    res = an.operator_spectrum_shift(_images(), "conv3x3", k, bands=4)
    np.testing.assert_allclose(res.after, res.before, atol=1e-15)


@pytest.mark.parametrize("op,params", [("conv3x3", np.zeros((3, 3))),
                                       ("linear_projection", np.zeros((16, 16)))])
def test_zero_operator_degenerate(op, params):
    res = an.operator_spectrum_shift(_images(), op, params, bands=4)
    assert res.degenerate and res.after is None


def test_seeded_random_operators_are_deterministic():
    for op in ("conv3x3", "linear_projection"):
        a = an.operator_spectrum_shift(_images(), op, bands=4, seed=3)
        b = an.operator_spectrum_shift(_images(), op, bands=4, seed=3)
        assert np.array_equal(a.after, b.after) and not a.degenerate


def test_operator_shape_errors():
    with pytest.raises(ValueError):
        an.operator_spectrum_shift(_images(), "conv3x3", np.ones((2, 2)))
    with pytest.raises(ValueError):
        an.operator_spectrum_shift(_images(), "linear_projection", np.eye(9))
    with pytest.raises(ValueError):
        an.operator_spectrum_shift(_images(), "fourier")


# -- parameter report -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_param_report_matches_enumeration_toy(variant):
    cfg = ModelConfig(variant=variant)
    rep = an.param_report(cfg)
    assert {g: c for g, (c, _) in rep.groups.items()} == oracles.group_counts(cfg)


@pytest.mark.parametrize("variant", VARIANTS)
def test_param_report_matches_allocated_model(variant):
    cfg = tiny_config(variant=variant)
    model = IVModel(cfg)
    counts, trainable = {}, {}
    groups = parameter_groups(model)
    for name, p in model.named_parameters():
        counts[groups[name]] = counts.get(groups[name], 0) + p.data.size
        trainable[groups[name]] = p.trainable
    rep = an.param_report(cfg)
    assert rep.groups == {g: (counts[g], trainable[g]) for g in counts}
    assert rep.total == model.num_parameters()


def test_param_report_vit_l_preset():
    rep = an.param_report("vit-l")
    cfg = an.PRESETS["vit-l"]
    counts = oracles.group_counts(cfg)
    backbone = counts["vis_embed"] + sum(counts[f"layers.{i}"] for i in range(24))
    side = counts["ir_embed"] + counts["mp_alpha"] + sum(counts[f"mp_beta.{i}"]
                                                         for i in range(24))
    assert (rep.backbone, rep.trainable_backbone_side, rep.head) == (backbone, side,
                                                                     counts["head"])
    assert rep.ratio == side / backbone < 0.03


def test_param_report_monotone_in_d_beta():
    counts = [an.param_report(ModelConfig(d_beta=d)).prompter for d in range(1, 33)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_param_report_errors():
    with pytest.raises(ValueError):
        an.param_report("vit-h")


# -- CSV writers ------------------------------------------------------------------------------

def test_csv_writers(tmp_path):
    an.write_pca_csv(tmp_path / "pca.csv", an.PcaReport({0: np.array([0.7, 0.3])}))
    an.write_spectrum_csv(tmp_path / "s.csv", {"ir": (np.array([0, 0.5, 1.0]),
                                                      np.array([0.9, 0.1]))})
    an.write_params_csv(tmp_path / "p.csv", an.param_report("toy"))
    assert (tmp_path / "pca.csv").read_text().splitlines() == [
        "# schema=ivtune-pca/1", "layer,rank_index,ratio", "0,0,0.7", "0,1,0.3"]
    assert (tmp_path / "s.csv").read_text().splitlines()[1:] == [
        "modality,band_lo,band_hi,energy", "ir,0.0,0.5,0.9", "ir,0.5,1.0,0.1"]
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[1] == "group,count,trainable" and lines[2].startswith("vis_embed,")
