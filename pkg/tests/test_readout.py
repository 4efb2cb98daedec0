import numpy as np
import pytest

from tlstrack.dynamics import DecayRates, PopulationState, closed_form_trace
from tlstrack.errors import InvalidParameterError, MitigationUnstableError
from tlstrack.readout import (
    ConfusionMatrix,
    IqBlobModel,
    ShotRecord,
    assignment_fidelity,
    calibrate_equilateral_radius,
    classify,
    classify_points,
    equilateral_assignment_probability,
    equilateral_blobs,
    mitigate,
    mitigate_trace,
    sample_blob,
    shot_records_from_csv,
    shot_records_to_csv,
    simulate_confusion_matrix,
)

ISO = np.repeat(np.eye(2)[None, :, :], 3, axis=0)


def iso_blobs(means):
    return IqBlobModel(np.asarray(means, dtype=float), ISO.copy())


def gauss_elim_solve(a, b):
    """Independent 3x3 solver: Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    n = 3
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        a[[col, pivot]] = a[[pivot, col]]
        b[[col, pivot]] = b[[pivot, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row] -= f * a[col]
            b[row] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


class TestClassify:
    def test_point_at_mean(self):
        blobs = iso_blobs([[0, 0], [10, 0], [0, 10]])
        assert classify(blobs, [10.0, 0.0]) == 1

    def test_tie_breaks_to_lower_index(self):
        blobs = iso_blobs([[0, 0], [2, 0], [10, 10]])
        assert classify(blobs, [1.0, 0.0]) == 0

    def test_likelihood_comparison(self):
        # nearest mean wins for equal isotropic covariances
        blobs = iso_blobs([[0, 0], [10, 0], [0, 10]])
        point = np.array([6.0, 1.0])
        d2 = [np.sum((point - m) ** 2) for m in blobs.means]
        assert classify(blobs, point) == int(np.argmin(d2)) == 1

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        blobs = iso_blobs([[0, 0], [4, 0], [0, 4]])
        perm = [2, 0, 1]
        permuted = iso_blobs(blobs.means[perm])
        points = rng.normal(scale=3.0, size=(200, 2))
        base = classify_points(blobs, points)
        relabeled = classify_points(permuted, points)
        lookup = {orig: new for new, orig in enumerate(perm)}
        assert np.array_equal(relabeled, np.array([lookup[s] for s in base]))

    def test_anisotropic_covariance(self):
        covs = ISO.copy()
        covs[0] = [[9.0, 0.0], [0.0, 0.25]]
        blobs = IqBlobModel(np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]), covs)
        # x=4 is 1.33 sigma from blob 0 along its wide axis, 1 sigma from blob 1
        assert classify(blobs, [4.0, 0.0]) == 1

    def test_invalid_covariance(self):
        with pytest.raises(InvalidParameterError):
            IqBlobModel(np.zeros((3, 2)), np.zeros((3, 2, 2)))
        bad = ISO.copy()
        bad[1] = [[1.0, 2.0], [0.5, 1.0]]
        with pytest.raises(InvalidParameterError):
            IqBlobModel(np.zeros((3, 2)), bad)


class TestConfusionSimulation:
    def test_far_separated_blobs_identity(self):
        blobs = iso_blobs([[0, 0], [1000, 0], [0, 1000]])
        cm = simulate_confusion_matrix(blobs, 2000, seed=1)
        assert np.array_equal(cm.m, np.eye(3))

    def test_identical_blobs_tie_break(self):
        blobs = iso_blobs([[1, 1], [1, 1], [1, 1]])
        cm = simulate_confusion_matrix(blobs, 500, seed=2)
        assert np.array_equal(cm.m, np.array([[1, 1, 1], [0, 0, 0], [0, 0, 0]], dtype=float))

    def test_deterministic_for_seed(self):
        blobs = equilateral_blobs(1.8)
        a = simulate_confusion_matrix(blobs, 4000, seed=42)
        b = simulate_confusion_matrix(blobs, 4000, seed=42)
        assert np.array_equal(a.m, b.m)
        c = simulate_confusion_matrix(blobs, 4000, seed=43)
        assert not np.array_equal(a.m, c.m)

    @pytest.mark.parametrize("seed,shots", [(0, 1), (1, 7), (2, 503), (3, 2000)])
    def test_column_stochastic(self, seed, shots):
        cm = simulate_confusion_matrix(equilateral_blobs(1.5), shots, seed=seed)
        assert np.max(np.abs(cm.m.sum(axis=0) - 1.0)) < 1e-12
        assert 1.0 / 3.0 <= cm.fidelity <= 1.0

    def test_fidelity_examples(self):
        assert assignment_fidelity(ConfusionMatrix(np.eye(3))) == 1.0
        assert assignment_fidelity(ConfusionMatrix(np.full((3, 3), 1.0 / 3.0))) == \
            pytest.approx(1.0 / 3.0)
        m = np.array([
            [0.930, 0.060, 0.053],
            [0.040, 0.880, 0.060],
            [0.030, 0.060, 0.887],
        ])
        assert assignment_fidelity(ConfusionMatrix(m)) == pytest.approx(0.899, abs=1e-12)


class TestCalibration:
    def test_quadrature_matches_simulation(self):
        radius = 1.8148436104016574
        p = equilateral_assignment_probability(radius)
        assert p == pytest.approx(0.899, abs=1e-6)
        cm = simulate_confusion_matrix(equilateral_blobs(radius), 40000, seed=9)
        assert cm.fidelity == pytest.approx(p, abs=5e-3)

    def test_bisection_inverts_quadrature(self):
        r = calibrate_equilateral_radius(0.93)
        assert equilateral_assignment_probability(r) == pytest.approx(0.93, abs=1e-7)

    def test_invalid_target(self):
        with pytest.raises(InvalidParameterError):
            calibrate_equilateral_radius(0.2)


class TestMitigation:
    def test_identity_unchanged(self):
        p = PopulationState(0.5, 0.3, 0.2)
        out = mitigate(ConfusionMatrix(np.eye(3)), p)
        assert np.array_equal(out.vector(), p.vector())

    @pytest.mark.parametrize("seed", range(8))
    def test_round_trip_random_matrices(self, seed):
        rng = np.random.default_rng(seed)
        m = ConfusionMatrix(_random_stochastic(rng))
        p = rng.dirichlet(np.ones(3))
        observed = PopulationState.from_vector(m.m @ p)
        out = mitigate(m, observed, clip=False)
        assert np.max(np.abs(out.vector() - p)) < 1e-10

    def test_raw_inverse_against_elimination_oracle(self):
        m = ConfusionMatrix(np.array([
            [0.93, 0.06, 0.05],
            [0.04, 0.88, 0.06],
            [0.03, 0.06, 0.89],
        ]))
        observed = PopulationState(0.4, 0.35, 0.25)
        out = mitigate(m, observed, clip=False)
        expected = gauss_elim_solve(m.m, observed.vector())
        assert np.max(np.abs(out.vector() - expected)) < 1e-12

    def test_clipping_renormalizes(self):
        m = ConfusionMatrix(np.array([
            [0.9, 0.1, 0.0],
            [0.1, 0.8, 0.1],
            [0.0, 0.1, 0.9],
        ]))
        # observation outside the reachable simplex forces a negative component
        out = mitigate(m, PopulationState(1.0, 0.0, 0.0))
        v = out.vector()
        assert np.all(v >= 0.0)
        assert v.sum() == pytest.approx(1.0, abs=1e-12)
        raw = mitigate(m, PopulationState(1.0, 0.0, 0.0), clip=False).vector()
        assert np.any(raw < 0.0)

    def test_near_singular_raises(self):
        m = np.array([
            [0.5, 0.5, 0.0],
            [0.5, 0.5, 0.5],
            [0.0, 0.0, 0.5],
        ])
        m[0, 1] -= 1e-9
        m[1, 1] += 1e-9
        cm = ConfusionMatrix(m)
        with pytest.raises(MitigationUnstableError) as exc:
            mitigate(cm, PopulationState(0.4, 0.4, 0.2))
        assert exc.value.condition_number >= 1e6

    def test_mitigate_trace(self):
        m = ConfusionMatrix(_random_stochastic(np.random.default_rng(3)))
        trace = closed_form_trace(DecayRates(1 / 155.0, 1 / 64.0), np.geomspace(1, 600, 10))
        corrupted = trace.populations @ m.m.T
        noisy = type(trace)(trace.delays, corrupted)
        recovered = mitigate_trace(m, noisy, clip=False)
        assert np.max(np.abs(recovered.populations - trace.populations)) < 1e-10


def _random_stochastic(rng):
    # diagonally dominant, comfortably invertible
    m = 0.7 * np.eye(3) + 0.3 * rng.dirichlet(np.ones(3), size=3).T
    return m / m.sum(axis=0)


class TestConfusionSerialization:
    def test_json_round_trip(self, tmp_path):
        cm = simulate_confusion_matrix(equilateral_blobs(1.8), 2000, seed=5)
        path = tmp_path / "confusion.json"
        cm.to_json(path)
        back = ConfusionMatrix.from_json(path)
        assert np.array_equal(back.m, cm.m)
        doc = cm.to_json_dict()
        assert doc["assignment_fidelity"] == pytest.approx(cm.fidelity)
        assert doc["condition_number"] == pytest.approx(cm.condition_number)

    def test_validation(self):
        with pytest.raises(InvalidParameterError):
            ConfusionMatrix(np.eye(3) * 1.5)
        with pytest.raises(InvalidParameterError):
            ConfusionMatrix(np.array([[0.9, 0, 0], [0.2, 1, 0], [0, 0, 1]]))


class TestShotRecords:
    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        blobs = equilateral_blobs(2.0)
        points = sample_blob(blobs, 1, 50, rng)
        states = classify_points(blobs, points)
        records = [ShotRecord(12.5, int(s), i) for i, s in enumerate(states)]
        path = tmp_path / "shots.csv"
        shot_records_to_csv(records, path)
        back = shot_records_from_csv(path)
        assert back == records

    def test_state_validation(self):
        with pytest.raises(InvalidParameterError):
            ShotRecord(1.0, 3, 0)
