import numpy as np

from oracles import fd_jacobian_stepped, fd_mixed_richardson


def test_stepped_jacobian_smooth_function():
    A = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    fn = lambda t: np.sin(A @ t)
    t = np.array([0.3, -0.7])
    exact = np.cos(A @ t)[:, None] * A
    np.testing.assert_allclose(fd_jacobian_stepped(fn, t), exact, atol=1e-9)


def test_stepped_jacobian_near_a_kink_and_a_steep_log():
    # |x - 2e-5| has its kink inside the widest stencils; slope at 0 is -1
    kink = fd_jacobian_stepped(lambda t: np.array([abs(t[0] - 2e-5)]), np.array([0.0]))
    assert abs(kink[0, 0] + 1.0) <= 1e-8
    # -log x at 1e-6: slope -1e6, wide stencils leave the domain of accuracy
    steep = fd_jacobian_stepped(lambda t: np.array([-np.log(t[0])]), np.array([1e-6]))
    assert abs(steep[0, 0] / -1e6 - 1.0) <= 1e-4


def test_richardson_mixed_partial():
    f = lambda u: np.exp(u[0] * u[1])
    u = np.array([0.4, 0.9])
    exact = (1 + u[0] * u[1]) * np.exp(u[0] * u[1])
    assert abs(fd_mixed_richardson(f, u, (0, 1)) - exact) <= 1e-7
