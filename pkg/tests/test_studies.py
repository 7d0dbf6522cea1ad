import numpy as np
import pytest

from pumrom import io, studies

LIN = dict(n_train=6, ns=[0, 2, 4], n_test=5, n_rep=1, te_pod_train=2, eff_reps=2, eff_n=2,
           eff_small=2, elems=6, degree=2)
NL = dict(n_dd=2, n_test=1, n_train=4, ns=[1, 2], alphas=[1.0], gaussian=True)
ENR = dict(n_train_loc=4, n_loc=2, n_train_glo=1, n_glo=1, maxit=1, n_test=3,
           n_dd_range=[2, 3], samplers=["smooth"])


def test_linear_study_outputs_and_determinism(tmp_path):
    a = studies.study_linear(LIN, 1, tmp_path / "a")
    studies.study_linear(LIN, 1, tmp_path / "b")
    for f in ("linear_errors.csv", "linear_te_pod.csv", "linear_effectivity.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = io.read_csv(tmp_path / "a" / "linear_errors.csv")
    assert len(rows) == 2 * 2 * 3
    # n = 0 gives error one; errors do not grow with n for a nested basis
    for tr in ("smooth", "gaussian"):
        for ts in ("smooth", "gaussian"):
            e = [r[4] for r in a["errors"] if r[1] == tr and r[2] == ts]
            assert e[0] == 1.0 and all(np.diff(e) <= 1e-12)
    # 6x6 Q2 patch: 4 * 12 boundary DOFs, one solve per DOF and parameter
    assert a["te_pod_solves"] == 2 * 48
    assert all(r[4] > 0 for r in a["effectivity"])
    man = io.read_json(tmp_path / "a" / "linear_manifest.json")
    assert man["seed"] == 1 and man["params"]["n_train"] == 6


def test_linear_study_rejects_large_n():
    with pytest.raises(ValueError):
        studies.study_linear(dict(LIN, ns=[10]), 0)


def test_nonlinear_study(tmp_path, fast_mesh):
    res = studies.study_nonlinear(NL, 2, tmp_path, fast_mesh)
    assert res["counts"] == {"int": 0, "co": 4, "ed": 0}
    names = {r[0] for r in res["local"]}
    assert names == {"smooth_a1", "gaussian", "opt"}
    assert len(res["global"]) == 2
    for row in res["global"]:
        # Galerkin error is never below the H1 projection error
        assert row[3] >= row[5] * (1 - 1e-10)
    assert (tmp_path / "nonlinear_local.csv").exists()


def test_enrichment_study(tmp_path, fast_mesh):
    res = studies.study_enrichment(ENR, 3, tmp_path, fast_mesh)
    its = {r[1] for r in res["errors"]}
    assert its == {0, 1} and len(res["errors"]) == 2 * 3
    s = res["summary"]
    assert set(s["smooth"]["median_h1"]) == {0, 1}
    assert -1 <= s["smooth"]["spearman"] <= 1
    rows = io.read_csv(tmp_path / "enrichment_errors.csv")
    assert float(rows[0]["effectivity"]) == pytest.approx(
        float(rows[0]["delta"]) / float(rows[0]["h1_rel"]))
