import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from fusionseg.errors import InvalidFractions
from fusionseg.optim import make_rng
from fusionseg.synth import CLOUDS, SNOW, SynthConfig, synth_labels, synth_scene


def test_fractions_reproduced():
    scene = synth_scene(SynthConfig(vnir_size=128), make_rng(0))
    frac = np.bincount(scene.labels.ravel(), minlength=4) / scene.labels.size
    np.testing.assert_allclose(frac, [0.45, 0.26, 0.07, 0.22], atol=0.05)


@settings(max_examples=15)
@given(st.lists(st.integers(1, 20), min_size=4, max_size=4), st.integers(0, 1000))
def test_fraction_targets_any(weights, seed):
    f = np.array(weights, float) / sum(weights)
    labels = synth_labels(SynthConfig(vnir_size=32, class_fractions=tuple(f)), make_rng(seed))
    got = np.bincount(labels.ravel(), minlength=4) / labels.size
    assert np.abs(got - f).max() <= 2 / labels.size + 1e-9


def test_invalid_fractions():
    with pytest.raises(InvalidFractions):
        synth_scene(SynthConfig(vnir_size=32, class_fractions=(0.5, 0.5, 0.5, 0.0)), make_rng(0))


def test_confusable_vnir_is_identical():
    scene = synth_scene(SynthConfig(vnir_size=128, confusability=1.0), make_rng(1))
    lab = scene.labels
    for b in range(3):
        band = scene.vnir.bands[0, b]
        res = ks_2samp(band[lab == CLOUDS], band[lab == SNOW])
        assert res.statistic < 0.03
        assert res.pvalue > 1e-3


def test_swir_still_separates_clouds_and_snow():
    scene = synth_scene(SynthConfig(vnir_size=128, confusability=1.0), make_rng(1))
    sw = scene.swir.bands[0, 0]
    blocks = scene.labels.reshape(32, 4, 32, 4).transpose(0, 2, 1, 3).reshape(32, 32, 16)
    pure_c = (blocks == CLOUDS).all(axis=-1)
    pure_s = (blocks == SNOW).all(axis=-1)
    assert sw[pure_c].min() > sw[pure_s].max()


def test_unconfused_classes_are_separable():
    # with confusability 0, nearest VNIR class mean labels almost every pixel correctly
    cfg = SynthConfig(vnir_size=128)
    scene = synth_scene(cfg, make_rng(4))
    vm = cfg.effective_spectra()[0]
    X = scene.vnir.bands[0].reshape(3, -1).T
    pred = ((X[:, None, :] - vm[None]) ** 2).sum(-1).argmin(1)
    assert np.mean(pred == scene.labels.ravel()) > 0.99


def test_seeded_scenes_identical():
    cfg = SynthConfig(vnir_size=64, confusability=0.7, swir_ambiguity=0.3)
    a = synth_scene(cfg, make_rng(11))
    b = synth_scene(cfg, make_rng(11))
    assert a.vnir.bands.tobytes() == b.vnir.bands.tobytes()
    assert a.swir.bands.tobytes() == b.swir.bands.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_swir_ambiguity_moves_means():
    _, _, sm, _ = SynthConfig(swir_ambiguity=1.0).effective_spectra()
    assert sm[2] == sm[SNOW] and sm[3] == sm[CLOUDS]
