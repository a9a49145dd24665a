import numpy as np
import pytest

from enkbf_lab import kernels
from enkbf_lab.enkbf import run_enkbf
from enkbf_lab.kbf import run_kbf
from enkbf_lab.mlmc import run_coupled
from enkbf_lab.model import ModelGenSpec, make_ou_model
from enkbf_lab.paths import simulate_truth_and_observations
from enkbf_lab.rng import derive_stream

needs_cython = pytest.mark.skipif(not kernels.HAVE_CYTHON, reason="extension not built")


@pytest.fixture(scope="module", params=[1, 3, 12])
def case(request):
    d = request.param
    m = make_ou_model(ModelGenSpec(d, d, block_size=min(d, 6), seed=d))
    rec = simulate_truth_and_observations(m, 2, 6, derive_stream(d))
    return m, rec


@needs_cython
@pytest.mark.parametrize("variant", ["vanilla", "deterministic"])
def test_enkbf_backends_agree(case, variant):
    m, rec = case
    s = derive_stream(4)
    e_c, eta_c = run_enkbf(variant, 30, 5, rec, m, s, "cython")
    e_p, eta_p = run_enkbf(variant, 30, 5, rec, m, s, "python")
    np.testing.assert_allclose(eta_c, eta_p, rtol=1e-11, atol=1e-12)


@needs_cython
@pytest.mark.parametrize("variant", ["vanilla", "deterministic"])
def test_coupled_backends_agree(case, variant):
    m, rec = case
    a = run_coupled(variant, 20, 6, rec, m, derive_stream(5), "cython")
    b = run_coupled(variant, 20, 6, rec, m, derive_stream(5), "python")
    np.testing.assert_allclose(a.increment, b.increment, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.fine_mean, b.fine_mean, rtol=1e-11, atol=1e-12)


@needs_cython
@pytest.mark.parametrize("form", ["vanilla", "deterministic"])
def test_kbf_backends_agree(case, form):
    m, rec = case
    a = run_kbf(rec, 6, m, form, "cython")
    b = run_kbf(rec, 6, m, form, "python")
    np.testing.assert_allclose(a.means, b.means, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(a.covs, b.covs, rtol=1e-11, atol=1e-12)


@needs_cython
def test_simulation_backends_agree(case, monkeypatch):
    m, _ = case
    s = derive_stream(8)
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "cython")
    a = simulate_truth_and_observations(m, 1, 5, s)
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "python")
    b = simulate_truth_and_observations(m, 1, 5, s)
    np.testing.assert_allclose(a.dY, b.dY, rtol=1e-11, atol=1e-13)


def test_auto_choice(monkeypatch):
    monkeypatch.delenv("ENKBF_LAB_BACKEND", raising=False)
    expected = "cython" if kernels.HAVE_CYTHON else "python"
    assert kernels.backend_name(2) == expected
    assert kernels.backend_name(kernels.CYTHON_MAX_DIM + 1) == "python"


def test_env_override(monkeypatch):
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "python")
    assert kernels.backend_name(1) == "python"
    assert kernels.get_backend(1) is kernels._kernels_py
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "fortran")
    with pytest.raises(ValueError):
        kernels.backend_name(1)


def test_forced_python_backend_gives_same_run(monkeypatch, model2, record2):
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "python")
    forced = run_enkbf("vanilla", 16, 4, record2, model2, derive_stream(2))[1]
    explicit = run_enkbf("vanilla", 16, 4, record2, model2, derive_stream(2), "python")[1]
    np.testing.assert_array_equal(forced, explicit)


def test_missing_extension_is_reported(monkeypatch):
    monkeypatch.setattr(kernels, "HAVE_CYTHON", False)
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "auto")
    assert kernels.backend_name(1) == "python"
    monkeypatch.setenv("ENKBF_LAB_BACKEND", "cython")
    with pytest.raises(ImportError):
        kernels.backend_name(1)
