import numpy as np
import pytest

from swarmloc import geom
from swarmloc import tensor as T
from swarmloc import tgeom as tg


def unit_quat(rng):
    return geom.quat_normalize(rng.standard_normal(4))


class TestForwardAgainstGeom:
    def test_quat_mul(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b = unit_quat(rng), unit_quat(rng)
            out = tg.quat_mul(T.constant(a), T.constant(b))
            assert np.allclose(out.data, geom.quat_mul(a, b), atol=1e-12)

    def test_rotate_and_inverse(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            q, v = unit_quat(rng), rng.standard_normal(3)
            assert np.allclose(
                tg.quat_rotate(T.constant(q), T.constant(v)).data,
                geom.quat_rotate(q, v),
                atol=1e-12,
            )
            assert np.allclose(
                tg.quat_rotate_inv(T.constant(q), T.constant(v)).data,
                geom.quat_rotate_inv(q, v),
                atol=1e-12,
            )

    def test_quat_to_mat(self):
        rng = np.random.default_rng(3)
        q = unit_quat(rng)
        assert np.allclose(tg.quat_to_mat(T.constant(q)).data, geom.quat_to_mat(q), atol=1e-12)

    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(4)
        for scale in (1e-10, 1e-6, 0.1, 2.0):
            w = rng.standard_normal(3)
            w = w / np.linalg.norm(w) * scale
            q = tg.quat_exp(T.constant(w))
            assert np.allclose(q.data, geom.quat_from_axis_angle(w), atol=1e-12)
            back = tg.quat_log(q)
            assert np.allclose(back.data, w, atol=1e-9)

    def test_skew(self):
        v = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(tg.skew(T.constant(v)).data, geom.skew(v))


def _case_quat_mul_a(rng):
    qc = T.constant(unit_quat(rng))
    return lambda x: tg.quat_mul(tg.vnormalize(x), qc), rng.standard_normal(4)


def _case_quat_mul_b(rng):
    qc = T.constant(unit_quat(rng))
    return lambda x: tg.quat_mul(qc, tg.vnormalize(x)), rng.standard_normal(4)


def _case_rotate_q(rng):
    vc = T.constant(rng.standard_normal(3))
    return lambda x: tg.quat_rotate(tg.vnormalize(x), vc), rng.standard_normal(4)


def _case_rotate_v(rng):
    qc = T.constant(unit_quat(rng))
    return lambda x: tg.quat_rotate(qc, x), rng.standard_normal(3)


def _case_rotate_inv_q(rng):
    vc = T.constant(rng.standard_normal(3))
    return lambda x: tg.quat_rotate_inv(tg.vnormalize(x), vc), rng.standard_normal(4)


def _case_rotate_inv_v(rng):
    qc = T.constant(unit_quat(rng))
    return lambda x: tg.quat_rotate_inv(qc, x), rng.standard_normal(3)


GRAD_CASES = [
    ("quat_mul_a", _case_quat_mul_a),
    ("quat_mul_b", _case_quat_mul_b),
    ("quat_rotate_q", _case_rotate_q),
    ("quat_rotate_v", _case_rotate_v),
    ("quat_rotate_inv_q", _case_rotate_inv_q),
    ("quat_rotate_inv_v", _case_rotate_inv_v),
    ("quat_to_mat", lambda rng: (lambda x: tg.quat_to_mat(tg.vnormalize(x)), rng.standard_normal(4))),
    ("quat_exp", lambda rng: (tg.quat_exp, rng.standard_normal(3) * 0.7)),
    ("quat_exp_small", lambda rng: (tg.quat_exp, rng.standard_normal(3) * 1e-5)),
    ("quat_log", lambda rng: (lambda x: tg.quat_log(tg.vnormalize(x)), unit_quat(rng) + rng.standard_normal(4) * 0.1)),
    ("quat_log_near_identity", lambda rng: (lambda x: tg.quat_log(tg.vnormalize(x)), np.array([1.0, 1e-5, -2e-5, 1e-5]))),
    ("skew", lambda rng: (tg.skew, rng.standard_normal(3))),
    ("vnormalize", lambda rng: (tg.vnormalize, rng.standard_normal(4))),
]


@pytest.mark.parametrize("name,case", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradcheck_geometry_primitives(name, case):
    rng = np.random.default_rng(abs(hash(name)) % (2**32))
    for trial in range(3):
        op, x0 = case(rng)
        out_shape = op(T.constant(x0)).data.shape
        w = T.constant(rng.standard_normal(out_shape) if out_shape else 1.0)
        report = T.gradcheck(
            lambda x: T.sum_(T.mul(op(x), w)), x0, step=1e-6, tol=1e-4
        )
        assert report.passed, f"{name} trial {trial}: {report}"


def test_unrolled_pose_update_chain_gradcheck():
    """Composite chain of the kind the unrolled solver builds."""
    rng = np.random.default_rng(99)
    q0 = unit_quat(rng)
    t_meas = rng.standard_normal(3)

    def f(delta):
        dq = tg.quat_exp(T.narrow(delta, slice(3, 6)))
        q = tg.vnormalize(tg.quat_mul(T.constant(q0), dq))
        t = T.narrow(delta, slice(0, 3))
        e = T.sub(T.constant(t_meas), tg.quat_rotate_inv(q, t))
        return T.sum_(T.mul(e, e))

    report = T.gradcheck(f, rng.standard_normal(6) * 0.3, step=1e-6, tol=1e-4)
    assert report.passed, report
