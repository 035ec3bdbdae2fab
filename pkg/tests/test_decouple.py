import importlib
import math

import numpy as np
import pytest

from marginals.decouple import (DecouplingCertificate, DecouplingFailure, DecouplingInput,
                                DegenerateInputError, HypothesisError, SeparationError,
                                calibrate_C, clustered_ensemble, decouple, min_norm_hull_point,
                                separating_direction, span_residual, verify_certificate)
from marginals.rng import Stream

from oracles import min_norm_by_faces, min_norm_cvxpy


class TestMinNorm:
    def test_single_point(self):
        z, w = min_norm_hull_point([[1.0, 2.0]])
        assert np.allclose(z, [1, 2]) and np.allclose(w, [1])

    def test_symmetric_pair(self):
        z, w = min_norm_hull_point([[1.0, -2.0], [-1.0, 2.0]])
        assert np.linalg.norm(z) < 1e-12
        assert w.sum() == pytest.approx(1.0) and np.all(w >= 0)

    def test_segment(self):
        z, w = min_norm_hull_point([[1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(z, [0.5, 0.5]) and np.allclose(w, [0.5, 0.5])

    @pytest.mark.parametrize("method", ["wolfe", "pairwise"])
    def test_against_face_oracle(self, method):
        rng = np.random.default_rng(0)
        for _ in range(40):
            m, n = rng.integers(1, 5), rng.integers(1, 4)
            P = rng.standard_normal((m, n)) + rng.standard_normal(n)
            z, w = min_norm_hull_point(P, method=method)
            assert np.allclose(w @ P, z) and np.all(w >= 0) and w.sum() == pytest.approx(1)
            assert np.linalg.norm(z - min_norm_by_faces(P)) <= 1e-6

    def test_against_cvxpy(self):
        rng = np.random.default_rng(1)
        P = rng.standard_normal((6, 3)) + 2.0
        z, _ = min_norm_hull_point(P)
        assert np.linalg.norm(z - min_norm_cvxpy(P)) <= 1e-5

    def test_optimality_probing_large_set(self):
        rng = np.random.default_rng(2)
        P = rng.standard_normal((60, 5)) + np.array([1.5, 0, 0, 0, 0])
        z, w = min_norm_hull_point(P)
        assert np.allclose(w @ P, z)
        U = rng.dirichlet(np.ones(60), size=1000)
        assert np.linalg.norm(z) <= np.linalg.norm(U @ P, axis=1).min() + 1e-12
        assert np.linalg.norm(z - min_norm_hull_point(P, method="wolfe")[0]) <= 1e-6

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            min_norm_hull_point(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            min_norm_hull_point([[np.nan, 1.0]])
        with pytest.raises(ValueError):
            min_norm_hull_point([[1.0]], method="simplex")


class TestSeparation:
    def test_two_points(self):
        x_bar, lam = separating_direction([[1.0, 0.0], [1.0, 1.0]])
        assert np.allclose(x_bar, [1, 0])
        assert np.allclose(lam @ np.array([[1.0, 0.0], [1.0, 1.0]]), x_bar)

    def test_equal_points(self):
        u = np.array([2.0, 1.0, 2.0])
        x_bar, lam = separating_direction(np.tile(u, (4, 1)))
        assert np.allclose(x_bar, u / 3) and lam.sum() == pytest.approx(1 / 3)

    def test_hyperplane_points(self):
        rng = np.random.default_rng(3)
        P = np.column_stack([np.ones(5), rng.standard_normal((5, 2))])
        x_bar, lam = separating_direction(P)
        z = min_norm_by_faces(P)
        assert x_bar[0] >= 1 / np.linalg.norm(z) - 1e-9
        assert np.allclose(x_bar, z / np.linalg.norm(z), atol=1e-6)
        assert np.all(P @ x_bar >= 1 - 1e-10)

    def test_violation_reports_worst_index(self):
        with pytest.raises(SeparationError) as exc:
            separating_direction([[0.5, 0.0], [0.6, 0.0]])
        assert exc.value.worst_index == 0
        with pytest.raises(SeparationError):
            separating_direction([[1.0, 0.0], [-1.0, 0.0]])


def equal_input(s=400, n=5, a=2.0, delta=0.1):
    x = np.eye(n)[0]
    return DecouplingInput(np.tile(a * x, (s, 1)), x, B=a / 2 / math.sqrt(n / s), M=a / 2,
                           delta=delta)


class TestDecouple:
    def test_degenerate_small_s(self):
        inp = equal_input(s=1)
        with pytest.raises(DegenerateInputError, match="s = 1"):
            decouple(inp, Stream(0))

    def test_equal_vectors(self):
        inp = equal_input()
        cert = decouple(inp, Stream(1))
        assert verify_certificate(cert, inp).ok
        assert cert.margin == pytest.approx(inp.a * float(inp.x @ cert.y))
        assert cert.margin >= inp.a / 4

    def test_clustered_success_rate(self):
        ok = 0
        for k in range(20):
            rng = Stream(5).child("ens", k).generator()
            inp = clustered_ensemble(50, 250, 0.25, rng)
            try:
                cert = decouple(inp, Stream(5).child("dec", k))
            except DecouplingFailure:
                continue
            assert verify_certificate(cert, inp).ok
            ok += 1
        assert ok >= 19

    def test_hypothesis_checks(self):
        inp = equal_input()
        with pytest.raises(HypothesisError):
            DecouplingInput(inp.X, 2 * inp.x, inp.B, inp.M, 0.1).check()
        with pytest.raises(HypothesisError):
            DecouplingInput(inp.X, inp.x, inp.B * 10, inp.M, 0.1).check()
        with pytest.raises(HypothesisError, match="C_impl"):
            inp.check(C_impl=1e6)
        inp.check(C_impl=None)

    def test_failure_report_lists_events(self, monkeypatch):
        dec = importlib.import_module("marginals.decouple")
        inp = equal_input()
        real = dec.verify_certificate
        monkeypatch.setattr(dec, "verify_certificate",
                            lambda c, i: dec.VerificationReport(False, ["forced"], *[0.0] * 3))
        with pytest.raises(DecouplingFailure) as exc:
            decouple(inp, Stream(0), max_attempts=3)
        assert len(exc.value.attempts) == 3
        ev = exc.value.attempts[0]
        assert {"attempt", "selected", "norm_y_bar", "norm_dev", "norm_control", "cardinality",
                "margin", "failure"} <= set(ev)
        assert ev["failure"] == ["forced"]
        assert real is not dec.verify_certificate

    def test_selector_mean(self):
        inp = clustered_ensemble(20, 400, 0.25, Stream(7).child("ens").generator())
        fired = total = 0
        for k in range(40):
            cert = decouple(inp, Stream(7).child(k))
            fired += sum(len(d) for d in cert.selector_draws)
            total += len(cert.selector_draws) * inp.s
        d = inp.delta_int
        assert abs(fired / total - d) <= 3 * math.sqrt(d * (1 - d) / total)

    def test_certificate_json_round_trip(self):
        inp = equal_input()
        cert = decouple(inp, Stream(2))
        back = DecouplingCertificate.from_json(cert.to_json())
        assert back.I == cert.I and np.array_equal(back.y, cert.y)
        assert verify_certificate(back, inp).ok


class TestVerify:
    def setup_method(self):
        self.inp = clustered_ensemble(20, 300, 0.25, Stream(3).generator())
        self.cert = decouple(self.inp, Stream(4))

    def test_valid(self):
        assert verify_certificate(self.cert, self.inp)

    def test_scaled_y(self):
        bad = DecouplingCertificate(self.cert.I, 0.9 * self.cert.y, self.cert.margin,
                                    self.cert.hull_weights)
        rep = verify_certificate(bad, self.inp)
        assert not rep.ok and any("||y||" in f for f in rep.failures)

    def test_enlarged_I_margin(self):
        X = self.inp.X.copy()
        comp = sorted(set(range(self.inp.s)) - set(self.cert.I))
        j = comp[0]
        X[j] = -X[j]   # now <X_j, y> < 0 < a/4
        inp = DecouplingInput(X, self.inp.x, self.inp.B, self.inp.M, self.inp.delta)
        bad = DecouplingCertificate(tuple(sorted(self.cert.I + (j,))), self.cert.y,
                                    self.cert.margin, self.cert.hull_weights)
        rep = verify_certificate(bad, inp)
        assert not rep.ok and any("margin" in f for f in rep.failures)

    def test_span_residual(self):
        V = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert span_residual(np.array([0.6, 0.8, 0.0]), V) < 1e-15
        assert span_residual(np.array([0.0, 0.0, 1.0]), V) == pytest.approx(1.0)
        assert span_residual(np.array([0.0, 0.0, 1.0]), np.zeros((0, 3))) == 1.0


def test_norm_control_frequency():
    hits = total = 0
    for k in range(20):
        inp = clustered_ensemble(50, 250, 0.25, Stream(8).child(k).generator())
        try:
            decouple(inp, Stream(9).child(k), max_attempts=1)
            hits += 1
            total += 1
        except DecouplingFailure as exc:
            total += 1
            hits += bool(exc.attempts[0]["norm_dev"] <= 2 * inp.delta_int)
    assert hits / total >= 0.85


def test_calibration_table():
    inputs = [clustered_ensemble(20, 300, 0.25, Stream(10).child(k).generator(), M_frac=f)
              for k, f in enumerate([0.1, 0.3, 0.5, 0.7])]
    cal = calibrate_C(inputs, [Stream(11).child(k) for k in range(4)])
    assert len(cal.table) == 4
    assert cal.C_min is not None and cal.C_min == cal.table[0][0]
