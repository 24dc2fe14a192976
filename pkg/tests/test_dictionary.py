import numpy as np
import pytest

from stcnn.dictionary import (ConvergenceError, DictionaryLearner, dict_learn,
                              kkt_residual, lasso_objective, load_match, load_model, save_model,
                              select_target, sparse_code, supervised_dict_learn, voxel_matrix)
from stcnn.metrics import binarize, jaccard, set_jaccard
from stcnn.synthetic import NetworkSpec, SyntheticSpec, synthesize
from stcnn.volume import Volume4D


def coordinate_descent(x, D, lam, sweeps=20000, tol=1e-14):
    """Cyclic coordinate descent for 0.5||x - D a||^2 + lam ||a||_1."""
    a = np.zeros(D.shape[1])
    col_sq = np.sum(D * D, axis=0)
    r = x.copy()
    for _ in range(sweeps):
        delta = 0.0
        for j in range(D.shape[1]):
            rho = D[:, j] @ r + col_sq[j] * a[j]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            r += D[:, j] * (a[j] - new)
            delta = max(delta, abs(new - a[j]))
            a[j] = new
        if delta < tol:
            break
    return a


def unit_atoms(rng, k, t):
    D = rng.standard_normal((k, t))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def two_network_volume():
    spec = SyntheticSpec((32, 10, 10, 10), [
        NetworkSpec([((3.0, 4.0, 4.5), 2.0)], [2, 18], [6, 6]),
        NetworkSpec([((6.5, 5.5, 4.5), 2.0)], [9, 25], [4, 4]),
    ], 0.0, 2)
    return synthesize(spec)


# ---------------------------------------------------------------- sparse coding


def test_code_exact_atom_with_zero_lambda():
    atoms = unit_atoms(np.random.default_rng(0), 4, 12)
    a = sparse_code(atoms[1], atoms, 0.0, tol=1e-10)
    np.testing.assert_allclose(a, [0, 1, 0, 0], atol=1e-8)


def test_code_null_threshold():
    rng = np.random.default_rng(1)
    atoms = unit_atoms(rng, 5, 12)
    x = rng.standard_normal(12)
    lam = np.abs(atoms @ x).max() * 1.001
    assert np.all(sparse_code(x, atoms, lam) == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_code_matches_coordinate_descent(seed):
    rng = np.random.default_rng(seed)
    atoms = unit_atoms(rng, 6, 10)
    x = rng.standard_normal(10)
    lam = 0.2
    a, info = sparse_code(x, atoms, lam, tol=1e-10, return_info=True)
    assert info["kkt"] < 1e-6
    assert np.abs(a - coordinate_descent(x, atoms.T, lam)).max() < 1e-6


def test_code_reports_non_convergence():
    rng = np.random.default_rng(2)
    atoms = unit_atoms(rng, 8, 10)
    with pytest.warns(UserWarning, match="KKT"):
        sparse_code(rng.standard_normal((10, 3)), atoms, 0.01, max_iter=1, tol=1e-14)


# ---------------------------------------------------------------- learning


def test_planted_courses_recovered(two_network_volume):
    vol, truth = two_network_volume
    model = dict_learn(vol, k=5, lam=0.05, iters=30, seed=0)
    for _, course in truth:
        best = max(abs(np.corrcoef(atom, course)[0, 1]) for atom in model.atoms)
        assert best >= 0.99


def test_atoms_unit_norm_and_monotone(two_network_volume):
    vol, _ = two_network_volume
    model = dict_learn(vol, k=5, lam=0.15, iters=15, seed=3)
    np.testing.assert_allclose(np.linalg.norm(model.atoms, axis=1), 1.0, atol=1e-12)
    obj = np.array(model.objective)
    assert np.all(np.diff(obj) <= 1e-9 * np.maximum(1.0, np.abs(obj[:-1])))


def test_spare_atoms_do_not_duplicate_used_ones(two_network_volume):
    vol, _ = two_network_volume
    model = dict_learn(vol, k=5, lam=0.15, iters=10, seed=0)
    gram = np.abs(model.atoms @ model.atoms.T) - np.eye(5)
    assert gram.max() < 0.999


def test_huge_lambda_gives_zero_coefficients(two_network_volume):
    vol, _ = two_network_volume
    model = dict_learn(vol, k=3, lam=1e6, iters=3, seed=0)
    assert np.all(model.coefficients == 0)
    X = voxel_matrix(vol)
    # objective uses the one-half convention
    assert model.objective[-1] == pytest.approx(0.5 * np.sum(X * X), rel=1e-12)


def test_dict_learn_deterministic(two_network_volume):
    vol, _ = two_network_volume
    a = dict_learn(vol, k=4, lam=0.15, iters=5, seed=7)
    b = dict_learn(vol, k=4, lam=0.15, iters=5, seed=7)
    assert a.atoms.tobytes() == b.atoms.tobytes()
    assert a.coefficients.tobytes() == b.coefficients.tobytes()


def test_k_must_be_below_voxel_count():
    vol = Volume4D(np.random.default_rng(0).standard_normal((10, 2, 2, 1)))
    with pytest.raises(ValueError):
        dict_learn(vol, k=4)


def test_divergence_raises_with_trace(monkeypatch, two_network_volume):
    import stcnn.dictionary as dl

    # a broken atom update that flips every atom must trip the monotone check
    monkeypatch.setattr(dl, "_update_atoms", lambda X, D, A, start: -D)
    with pytest.raises(ConvergenceError) as info:
        dict_learn(two_network_volume[0], k=3, lam=0.1, iters=3)
    assert len(info.value.trace) == 2
    assert info.value.trace[1] > info.value.trace[0]


def test_convergence_error_carries_trace():
    err = ConvergenceError("boom", [3.0, 4.0])
    assert err.trace == [3.0, 4.0]


# ---------------------------------------------------------------- supervised


def test_supervised_support_matches_planted(two_network_volume):
    vol, truth = two_network_volume
    m, course = truth[0]
    model = supervised_dict_learn(vol, [course], k=3, lam=0.05, iters=10)
    support = binarize(model.maps[0]) | (model.maps[0] != 0)
    assert np.array_equal(model.maps[0] != 0, m > 0)
    assert support.sum() > 0


def test_supervised_fixed_atom_stays_fixed(two_network_volume):
    vol, truth = two_network_volume
    course = truth[1][1]
    model = supervised_dict_learn(vol, [course], k=4, lam=0.1, iters=5)
    expected = (course - course.mean()) / np.linalg.norm(course - course.mean())
    np.testing.assert_allclose(model.atoms[0], expected, atol=1e-15)


def test_supervised_orthogonal_atom_gives_zero_map(two_network_volume):
    vol, truth = two_network_volume
    X = voxel_matrix(vol)
    u, sv, _ = np.linalg.svd(X, full_matrices=False)
    q, _ = np.linalg.qr(np.column_stack([np.ones(32), u[:, sv > 1e-9 * sv[0]]]))
    rng = np.random.default_rng(4)
    z = rng.standard_normal(32)
    z -= q @ (q.T @ z)  # orthogonal to the data span and to constants
    model = supervised_dict_learn(vol, [z], k=1, lam=0.05, iters=2)
    assert np.abs(model.maps[0]).max() < 1e-8


def test_supervised_projection_oracle():
    rng = np.random.default_rng(5)
    vol = Volume4D(rng.standard_normal((12, 3, 3, 3)))
    atom = rng.standard_normal(12)
    model = supervised_dict_learn(vol, [atom], k=1, lam=0.0, iters=1, tol=1e-12, max_iter=10000)
    d = (atom - atom.mean()) / np.linalg.norm(atom - atom.mean())
    expected = d @ voxel_matrix(vol)
    np.testing.assert_allclose(model.coefficients[0], expected, atol=1e-9)


# ---------------------------------------------------------------- selection and Jaccard


def test_set_jaccard_oracles():
    a = np.array([1, 1, 0], dtype=bool)
    b = np.array([0, 1, 1], dtype=bool)
    assert set_jaccard(a, b) == (1 / 3, False)
    assert set_jaccard(a, a)[0] == 1.0
    assert set_jaccard(a, ~a)[0] == 0.0
    assert set_jaccard(np.zeros(3, bool), np.zeros(3, bool)) == (0.0, True)


def test_binarize_rule():
    v = np.array([0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0])
    cut = 2 * v[v != 0].std()
    np.testing.assert_array_equal(binarize(v), np.abs(v) > cut)
    assert binarize(np.array([0.0, 2.0, 2.0])).tolist() == [False, True, True]


def toy_model(maps):
    maps = np.asarray(maps, dtype=float)
    mask = np.ones(maps.shape[1:], dtype=bool)
    from stcnn.dictionary import DictionaryModel
    return DictionaryModel(np.eye(len(maps), 4), maps.reshape(len(maps), -1), 0.1, mask)


def test_select_target_examples():
    tmpl = np.zeros((2, 2, 2))
    tmpl[0, 0, :] = 1
    other = np.zeros((2, 2, 2))
    other[1, 1, :] = 1
    model = toy_model([other, tmpl, tmpl])
    match = select_target(model, tmpl)
    assert (match.best_index, match.jaccard) == (1, 1.0)  # lowest index on ties
    assert match.all_scores[0] == 0.0


def test_select_target_scale_invariant():
    rng = np.random.default_rng(6)
    maps = rng.standard_normal((4, 3, 3, 3)) * (rng.random((4, 3, 3, 3)) > 0.5)
    tmpl = (rng.random((3, 3, 3)) > 0.7).astype(float)
    base = select_target(toy_model(maps), tmpl)
    scaled = select_target(toy_model(maps * rng.uniform(0.1, 10, size=(4, 1, 1, 1))), tmpl)
    np.testing.assert_array_equal(base.all_scores, scaled.all_scores)


def test_select_target_no_match_warns():
    with pytest.warns(UserWarning, match="no atom"):
        match = select_target(toy_model(np.zeros((2, 2, 2, 2))), np.ones((2, 2, 2)))
    assert match.no_match and match.best_index == 0


def test_model_files_roundtrip(tmp_path, two_network_volume):
    vol, truth = two_network_volume
    model = dict_learn(vol, k=3, lam=0.15, iters=3)
    match = select_target(model, truth[0][0])
    save_model(model, tmp_path, match)
    back = load_model(tmp_path)
    np.testing.assert_array_equal(back.atoms, model.atoms)
    np.testing.assert_allclose(back.coefficients, model.coefficients, rtol=1e-6, atol=1e-7)
    m2 = load_match(tmp_path)
    assert m2.best_index == match.best_index and m2.jaccard == match.jaccard


def test_estimator_interface(two_network_volume):
    vol, truth = two_network_volume
    est = DictionaryLearner(n_atoms=4, lam=0.1, iters=5)
    assert est.get_params() == {"n_atoms": 4, "lam": 0.1, "iters": 5, "seed": 0}
    maps = est.fit(vol).transform(vol)
    assert maps.shape == (4, 10, 10, 10)
    assert est.select(truth[0][0]).jaccard == pytest.approx(
        max(jaccard(m, truth[0][0]) for m in est.model_.maps))


def test_kkt_zero_at_solution():
    rng = np.random.default_rng(8)
    D = unit_atoms(rng, 3, 6).T
    x = rng.standard_normal((6, 1))
    a = coordinate_descent(x[:, 0], D, 0.1)[:, None]
    assert kkt_residual(x, D, a, 0.1) < 1e-9
    assert lasso_objective(x, D, a, 0.1) <= lasso_objective(x, D, a * 0.9, 0.1)
