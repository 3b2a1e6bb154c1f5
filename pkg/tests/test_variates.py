import math
import pickle

import numpy as np
import pytest

from stochnet import variates as vr
from stochnet.streams import Streams, chunks, derive_seed, stream


def test_exponential_scale_value():
    spec = vr.exponential_scale("t", 0)
    assert vr.sample(spec, [2.0], 1 - math.exp(-1)) == pytest.approx(2.0, abs=1e-12)


def test_exponential_scale_derivative_is_tau_over_theta():
    spec = vr.exponential_scale("t", 0)
    u = 0.3
    tau = vr.sample(spec, [1.7], u)
    assert vr.sample_derivative(spec, [1.7], u)[0] == pytest.approx(tau / 1.7)


def test_location_scale_identity_transform():
    spec = vr.location_scale("t", "normal", 0, 1)
    for u in (0.1, 0.5, 0.9):
        assert vr.sample(spec, [1.0, 0.0], u) == pytest.approx(vr.BASES["normal"].quantile(u))


def test_location_scale_formula_and_gradient():
    spec = vr.location_scale("t", "uniform", 0, 1)  # xi(u) = u
    assert vr.sample(spec, [2.0, 3.0, 9.0], 0.5) == pytest.approx(2 * 0.5 + 3)
    assert vr.sample_derivative(spec, [2.0, 3.0, 9.0], 0.5).tolist() == [0.5, 1.0, 0.0]


def test_sample_outside_box():
    spec = vr.exponential_scale("t", 0)
    box = vr.Box((0.5,), (2.0,))
    with pytest.raises(vr.ParameterError):
        vr.sample(spec, [3.0], 0.5, box)


def test_sample_rejects_bad_uniform():
    spec = vr.exponential_scale("t", 0)
    with pytest.raises(ValueError):
        vr.sample(spec, [1.0], 1.0)


FAMILIES = [
    vr.exponential_scale("a", 0),
    vr.location_scale("b", "normal", 1, 0),
    vr.location_scale("c", "uniform", vr.Affine(2.0, ((0, -1.0),)), vr.Affine(0.5, ((1, 2.0),))),
    vr.location_scale("d", vr.truncated_normal(-1.0, 2.0), 0, 1),
    vr.VariateSpec("e", vr.InverseTransform("weibull", (0, 1))),
]


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: s.id)
def test_derivative_matches_finite_difference(spec):
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(200):
        theta = rng.uniform(0.6, 1.4, size=2)
        u = rng.uniform(0.01, 0.99)
        g = vr.sample_derivative(spec, theta, u)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (vr.sample(spec, theta + e, u) - vr.sample(spec, theta - e, u)) / (2 * h)
            assert abs(fd - g[k]) <= 1e-4 * max(1.0, abs(fd))


def test_exponential_nondecreasing_in_scale():
    spec = vr.exponential_scale("t", 0)
    u = np.linspace(0.01, 0.99, 50)
    assert np.all(spec.family.sample(np.array([1.2]), u) >= spec.family.sample(np.array([1.0]), u))


def test_table_rejects_nonpositive_scale():
    spec = vr.location_scale("t", "exponential", vr.Affine(1.0, ((0, -1.0),)))
    with pytest.raises(vr.ParameterError):
        vr.table_from([spec], [0.0], [1.0])


def test_table_rejects_parameter_outside_dimension():
    with pytest.raises(vr.ParameterError):
        vr.table_from([vr.exponential_scale("t", 3)], [1.0], [2.0])


def test_box_projection():
    box = vr.Box((0.0, 1.0), (1.0, 2.0))
    assert box.project([-1.0, 5.0]).tolist() == [0.0, 2.0]
    assert box.contains([0.5, 1.5]) and not box.contains([0.5, 2.5])


# --------------------------------------------------------------------------
# certificates


def test_certificate_passes_independent_exponentials():
    table = vr.table_from([vr.exponential_scale(f"t{i}", i) for i in range(3)], [0.5] * 3, [2.0] * 3)
    cert = vr.check_dclass(table)
    assert cert.passed and bool(cert)
    assert all(v.continuous and v.independent for v in cert.variates)
    assert all(math.isfinite(v.lipschitz_mean_bound) for v in cert.variates)


def test_certificate_catches_shared_stream():
    f = vr.location_scale("f", "uniform", 1.0, vr.Affine(0.0, ((0, -1.0),)), stream="omega")
    g = vr.location_scale("g", "uniform", 1.0, 0, stream="omega")
    cert = vr.check_dclass(vr.table_from([f, g], [-1.0], [1.0]))
    assert not cert.passed
    assert [v.hypothesis for v in cert.violations] == ["independence"]
    assert cert.violations[0].variates == ("f", "g")


def test_certificate_catches_atom():
    f = vr.VariateSpec("f", vr.AtomMixture(0.5, 1.0, 0, 0.5, 1.0))
    g = vr.exponential_scale("g", 0)
    cert = vr.check_dclass(vr.table_from([f, g], [0.1], [1.0]))
    assert [(v.hypothesis, v.variates) for v in cert.violations] == [("continuity", ("f",))]


def test_certificate_order_independent():
    specs = [vr.exponential_scale("a", 0), vr.location_scale("b", "uniform", 1.0, 0, stream="a"), vr.exponential_scale("c", 0)]
    one = vr.check_dclass(vr.table_from(specs, [1.0], [2.0]))
    two = vr.check_dclass(vr.table_from(specs[::-1], [1.0], [2.0]))
    assert one == two


def test_quotient_needs_positive_lower_bound():
    plain = vr.exponential_scale("s", 0)
    shifted = vr.location_scale("s", "exponential", 0, 0.1)
    assert not vr.check_dclass(vr.table_from([plain], [1.0], [2.0]), "u", [plain]).passed
    assert vr.check_dclass(vr.table_from([plain], [1.0], [2.0]), "u", [plain], quotient_declared=True).passed
    cert = vr.check_dclass(vr.table_from([shifted], [1.0], [2.0]), "u", [shifted])
    assert cert.passed and cert.quotient["lower_bound"] == pytest.approx(0.1)


# --------------------------------------------------------------------------
# streams


def test_stream_reproducible():
    assert np.array_equal(stream(1, 5, "t1", 100), stream(1, 5, "t1", 100))


def test_stream_separation():
    a = stream(1, 5, "t1", 100)
    assert not np.array_equal(a, stream(1, 5, "t2", 100))
    assert not np.array_equal(a, stream(1, 6, "t1", 100))
    assert not np.array_equal(a, stream(2, 5, "t1", 100))


def test_stream_scalar_and_vector_agree():
    s = Streams(42)
    vec = s.uniforms(np.arange(20), "x", 3)
    assert [s.uniform(r, "x", 3) for r in range(20)] == vec.tolist()


def test_stream_open_interval_and_mean():
    u = Streams(0).uniforms(np.arange(1_000_000), "mean-check", 0)
    assert u.min() > 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.002


def test_stream_audit_and_pickle():
    s = Streams(3, audit=True)
    s.uniform(7, "a", 2)
    s.uniforms([1, 2], "b", 0)
    assert s.accessed == {(7, "a", 2), (1, "b", 0), (2, "b", 0)}
    assert s.replications_read() == {1, 2, 7}
    clone = pickle.loads(pickle.dumps(s))
    assert clone.seed == 3 and clone.uniform(7, "a", 2) == s.uniform(7, "a", 2)


def test_derive_seed_distinct():
    seeds = {derive_seed(1, n, r) for n in (100, 1000) for r in range(50)}
    assert len(seeds) == 100


def test_chunks_preserve_order():
    reps = np.arange(10)
    assert np.array_equal(np.concatenate(chunks(reps, 3)), reps)
    assert len(chunks(reps[:2], 5)) == 2
