import numpy as np
import pytest
import scipy.sparse as sp

from romdiff.eigen import solve_direct
from romdiff.errors import ConfigError, DimensionMismatch, InvalidMaterial
from romdiff.model import (FACES, assemble_operators, evaluate_parameters, load_config, load_model,
                           model_from_dict, transpose_operators)

CORE = {"D": [1.5, 0.4], "sigma_a": [0.01, 0.085], "scatter": [[0.0, 0.02], [0.0, 0.0]],
        "chi": [1.0, 0.0], "nu_sigma_f": [0.005, 0.14]}


def box_config(materials, cells=(1, 1, 1), widths=(1.0, 1.0, 1.0), boundary="reflective",
               boxes=(), fill=None, groups=None):
    groups = groups or len(next(iter(materials.values()))["D"])
    bc = {f: boundary for f in FACES} if isinstance(boundary, str) else boundary
    return {
        "groups": groups,
        "geometry": {"cells": list(cells), "widths_cm": list(widths),
                     "region_grid": {"fill": fill or next(iter(materials)), "boxes": list(boxes)},
                     "boundary": bc},
        "materials": materials,
        "parameter_map": {"type": "custom", "bounds": [[0.5, 1.5]], "reference": [1.0],
                          "rules": [{"param": 0, "field": "nu_sigma_f", "op": "multiply"}]},
    }


ONE_GROUP = {"D": [1.2], "sigma_a": [0.05], "scatter": [[0.3]], "chi": [1.0], "nu_sigma_f": [0.06]}


def test_one_group_infinite_medium():
    m = model_from_dict(box_config({"fuel": ONE_GROUP}, widths=(2.0, 3.0, 0.5)))
    ops = m.operators()
    V = 3.0
    # self-scatter cancels in the removal term
    assert ops.A.toarray()[0, 0] == pytest.approx(0.05 * V, rel=1e-15)
    assert ops.B.toarray()[0, 0] == pytest.approx(0.06 * V, rel=1e-15)
    assert solve_direct(ops).k == pytest.approx(0.06 / 0.05, rel=1e-12)


def test_two_group_infinite_medium_oracle():
    m = model_from_dict(box_config({"core": CORE}))
    # analytic k_inf with chi = (1, 0) and no upscatter
    nsf1, nsf2, sa1, sa2, s12 = 0.005, 0.14, 0.01, 0.085, 0.02
    k_inf = (nsf1 + nsf2 * s12 / sa2) / (sa1 + s12)
    assert k_inf == pytest.approx(1.26471, abs=1e-5)
    assert solve_direct(m.operators()).k == pytest.approx(k_inf, rel=1e-8)


def test_two_cells_flat_flux():
    m = model_from_dict(box_config({"core": CORE}, cells=(2, 1, 1)))
    u = solve_direct(m.operators()).u
    assert u[0] == pytest.approx(u[1], rel=1e-12)
    assert u[2] == pytest.approx(u[3], rel=1e-12)


def test_reflective_row_sums_equal_absorption():
    mats = {"a": ONE_GROUP, "b": {**ONE_GROUP, "D": [0.3], "sigma_a": [0.2]}}
    cfg = box_config(mats, cells=(5, 4, 3), widths=(1.0, 2.0, 0.5),
                     boxes=[{"region": "b", "x": [0, 2], "y": [0, 4]}])
    m = model_from_dict(cfg)
    A = m.operators().A
    rid = m.geometry.region_ids()
    expected = np.where(rid == 0, 0.05, 0.2) * m.geometry.volume
    np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), expected, rtol=1e-12, atol=1e-14)


def test_vacuum_makes_rows_strictly_dominant(takeda_small):
    ops = takeda_small.operators()
    for g in range(2):
        Agg = ops.A_blocks[g][g].toarray()
        diag = np.abs(np.diag(Agg))
        off = np.abs(Agg).sum(axis=1) - diag
        assert np.all(diag > off)


def test_block_structure(takeda_small):
    ops = takeda_small.operators()
    assert ops.A_blocks[0][1].nnz == 0
    assert ops.A_blocks[1][0].nnz > 0
    assert np.all(ops.A_blocks[1][0].data < 0)
    for g in range(2):
        assert np.all(ops.A_blocks[g][g].diagonal() > 0)
        off = ops.A_blocks[g][g] - sp.diags(ops.A_blocks[g][g].diagonal())
        assert np.all(off.data <= 0)
    assert np.all(ops.B.data >= 0)
    # B blocks are diagonal
    for row in ops.B_blocks:
        for blk in row:
            assert (blk - sp.diags(blk.diagonal())).nnz == 0
    assert ops.size == 2 * 64


def _flip_x(cfg):
    cfg = load_config(cfg)
    geo = cfg["geometry"]
    ext = geo["cells"][0] * geo["widths_cm"][0]
    for box in geo["region_grid"]["boxes"]:
        if "x" in box:
            lo, hi = box["x"]
            box["x"] = [ext - hi, ext - lo]
    bc = geo["boundary"]
    bc["x-"], bc["x+"] = bc["x+"], bc["x-"]
    return cfg


def test_permutation_equivariance():
    cfg = load_config("takeda-like")
    cfg["geometry"]["cells"] = [5, 3, 4]
    cfg["geometry"]["widths_cm"] = [5.0, 25 / 3, 6.25]
    A = model_from_dict(cfg).operators().A
    A_flip = model_from_dict(_flip_x(cfg)).operators().A
    nx, ny, nz = 5, 3, 4
    idx = np.arange(nx * ny * nz).reshape((nx, ny, nz), order="F")
    perm_cells = idx[::-1].ravel(order="F")
    perm = np.concatenate([perm_cells, perm_cells + nx * ny * nz])
    P = sp.csr_matrix((np.ones(len(perm)), (np.arange(len(perm)), perm)))
    np.testing.assert_allclose((P @ A @ P.T).toarray(), A_flip.toarray(), rtol=1e-14, atol=1e-14)


def test_transpose_operators():
    one = model_from_dict(box_config({"f": ONE_GROUP}, cells=(3, 2, 2), boundary="vacuum")).operators()
    t = transpose_operators(one)
    assert abs(t.A - one.A).max() == 0.0
    two = load_model("takeda-like", cells=(3, 3, 3)).operators()
    t2 = transpose_operators(two)
    assert t2.A_blocks[1][0].nnz == 0 and t2.A_blocks[0][1].nnz > 0
    assert abs(t2.A - two.A.T).max() == 0.0
    tt = transpose_operators(t2)
    for g in range(2):
        for gp in range(2):
            assert abs(tt.A_blocks[g][gp] - two.A_blocks[g][gp]).max() == 0.0 if two.A_blocks[g][gp].nnz else True
            assert (tt.B_blocks[g][gp] != two.B_blocks[g][gp]).nnz == 0


def test_takeda_reference_point_is_nominal(takeda_small):
    mats = evaluate_parameters(takeda_small.parameter_map, np.ones(5), takeda_small.materials)
    for name, m in takeda_small.materials.items():
        for f in ("D", "sigma_a", "scatter", "chi", "nu_sigma_f"):
            np.testing.assert_array_equal(getattr(mats[name], f), getattr(m, f))
    a = takeda_small.operators(np.ones(5))
    b = assemble_operators(takeda_small.geometry, takeda_small.materials)
    assert a.A.data.tobytes() == b.A.data.tobytes()
    assert a.B.data.tobytes() == b.B.data.tobytes()


def test_takeda_single_parameter(takeda_small):
    mats = takeda_small.materials_at([1.2, 1, 1, 1, 1])
    for name, nom in takeda_small.materials.items():
        got = mats[name]
        assert got.D[0] == nom.D[0] / 1.2
        assert got.sigma_a[0] == nom.sigma_a[0] * 1.2
        np.testing.assert_array_equal(got.D[1:], nom.D[1:])
        np.testing.assert_array_equal(got.sigma_a[1:], nom.sigma_a[1:])
        np.testing.assert_array_equal(got.scatter, nom.scatter)
        np.testing.assert_array_equal(got.nu_sigma_f, nom.nu_sigma_f)
        # total rebuilt from the scaled absorption
        assert got.sigma_t[0] == pytest.approx(nom.sigma_a[0] * 1.2 + nom.scatter[0].sum())


def test_takeda_scatter_and_fission_parameters(takeda_small):
    mats = takeda_small.materials_at([1, 1, 0.9, 1.1, 0.8])
    nom = takeda_small.materials["core"]
    got = mats["core"]
    assert got.scatter[0, 1] == nom.scatter[0, 1] * 0.9
    assert got.nu_sigma_f[0] == nom.nu_sigma_f[0] * 1.1
    assert got.nu_sigma_f[1] == nom.nu_sigma_f[1] * 0.8


def test_region_scaling_independence():
    m = load_model("minicore-like", cells=(5, 5, 5))
    pm = m.parameter_map
    assert pm.dim == 9
    mu = pm.reference.copy()
    mats_ref = m.materials_at(mu)
    for name, nom in m.materials.items():
        np.testing.assert_array_equal(mats_ref[name].sigma_a, nom.sigma_a)
    mu[0] = 72000.0
    mats = m.materials_at(mu)
    np.testing.assert_allclose(mats["ugd12"].sigma_a, m.materials["ugd12"].sigma_a * 1.1)
    np.testing.assert_allclose(mats["ugd12"].nu_sigma_f, m.materials["ugd12"].nu_sigma_f * 0.9)
    for name in m.materials:
        if name != "ugd12":
            np.testing.assert_array_equal(mats[name].sigma_a, m.materials[name].sigma_a)


def test_parameter_dimension_and_extrapolation(takeda_small):
    with pytest.raises(DimensionMismatch):
        takeda_small.materials_at([1.0, 1.0])
    with pytest.warns(UserWarning, match="extrapolation"):
        takeda_small.materials_at([1.25, 1, 1, 1, 1])


def test_config_rejects_unknown_and_missing_keys():
    cfg = load_config("takeda-like")
    cfg["geometry"]["colour"] = "red"
    with pytest.raises(ConfigError, match="colour"):
        model_from_dict(cfg)
    cfg = load_config("takeda-like")
    del cfg["geometry"]["boundary"]["x-"]
    with pytest.raises(ConfigError, match="x-"):
        model_from_dict(cfg)
    cfg = load_config("minicore-like")
    del cfg["parameter_map"]["bounds"]
    with pytest.raises(ConfigError, match="bounds"):
        model_from_dict(cfg)


@pytest.mark.parametrize("bad", [
    {"D": [-1.0]},
    {"nu_sigma_f": [-0.1]},
    {"chi": [0.5]},
    {"sigma_a": [float("nan")]},
])
def test_invalid_material(bad):
    with pytest.raises(InvalidMaterial):
        model_from_dict(box_config({"f": {**ONE_GROUP, **bad}}))


def test_refinement_keeps_extent():
    m = load_model("takeda-like", cells=(5, 5, 5))
    assert m.geometry.extent == pytest.approx((25.0, 25.0, 25.0))
    assert m.geometry.widths == (5.0, 5.0, 5.0)
    # void column sits at x in [15, 20], y in [0, 5]
    void = list(m.geometry.region_names).index("void")
    assert np.all(m.geometry.regions[3, 0, :] == void)
    assert m.config_hash != load_model("takeda-like").config_hash
