import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempo4d.autograd import Tensor
from tempo4d.gradcheck import max_relative_error, numerical_grads
from tempo4d.ssm import (
    ORDERS,
    TriDirConfig,
    _block,
    affine_scan_parallel,
    affine_scan_sequential,
    bidirectional_scan,
    enhance_volume,
    init_tridir,
    scan_order_transform,
    ssm_scan_parallel,
    ssm_scan_sequential,
    tridir_backward,
    tridir_block_forward,
)


def stable_params(rng, L, batch=(), n=4, dtype=np.float64):
    shape = (L,) + tuple(batch) + (n,)
    A = rng.uniform(0.5, 0.999, shape).astype(dtype)
    B = rng.standard_normal(shape).astype(dtype)
    C = rng.standard_normal(shape).astype(dtype)
    return A, B, C


def mp_recurrence(A, B, C, x):
    """Scalar-state-by-state reference at 40 significant digits."""
    mpmath.mp.dps = 40
    L, n = A.shape
    h = [mpmath.mpf(0)] * n
    y = []
    for t in range(L):
        h = [mpmath.mpf(A[t, k]) * h[k] + mpmath.mpf(B[t, k]) * mpmath.mpf(x[t]) for k in range(n)]
        y.append(sum(mpmath.mpf(C[t, k]) * h[k] for k in range(n)))
    return np.array([float(v) for v in y])


# --------------------------------------------------------------- sequential
def test_zero_decay_is_memoryless():
    rng = np.random.default_rng(0)
    _, B, C = stable_params(rng, 10)
    x = rng.standard_normal(10)
    y = ssm_scan_sequential(np.zeros_like(B), B, C, x)
    assert np.allclose(y, (C * B).sum(-1) * x, rtol=1e-14, atol=0)


def test_unit_params_give_prefix_sums():
    x = np.arange(1.0, 9.0)
    ones = np.ones((8, 1))
    y = ssm_scan_sequential(ones, ones, ones, x)
    assert np.array_equal(y, np.cumsum(x))
    assert np.array_equal(ssm_scan_parallel(ones, ones, ones, x), np.cumsum(x))


def test_sequential_matches_high_precision_oracle():
    rng = np.random.default_rng(1)
    A, B, C = stable_params(rng, 64, n=3)
    x = rng.standard_normal(64)
    assert np.max(np.abs(ssm_scan_sequential(A, B, C, x) - mp_recurrence(A, B, C, x))) < 1e-10


def test_length_mismatch_errors():
    A = np.ones((5, 2))
    with pytest.raises(ValueError):
        ssm_scan_sequential(A, A, A, np.ones(4))
    with pytest.raises(ValueError):
        ssm_scan_parallel(A, np.ones((4, 2)), A, np.ones(5))


# ----------------------------------------------------------------- parallel
@pytest.mark.parametrize("L", [1, 2, 3, 5, 7, 64, 100, 129])
def test_parallel_matches_sequential(L):
    rng = np.random.default_rng(L)
    A, B, C = stable_params(rng, L, (3,), n=4)
    x = rng.standard_normal((L, 3))
    ref = ssm_scan_sequential(A, B, C, x)
    assert np.max(np.abs(ssm_scan_parallel(A, B, C, x) - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())
    A32, B32, C32, x32 = (v.astype(np.float32) for v in (A, B, C, x))
    out32 = ssm_scan_parallel(A32, B32, C32, x32)
    assert out32.dtype == np.float32
    assert np.max(np.abs(out32 - ssm_scan_sequential(A32, B32, C32, x32))) <= 1e-5 * max(1.0, np.abs(ref).max())


def test_single_step_is_exact():
    rng = np.random.default_rng(3)
    A, B, C = stable_params(rng, 1)
    x = rng.standard_normal(1)
    assert np.array_equal(ssm_scan_parallel(A, B, C, x), ssm_scan_sequential(A, B, C, x))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 512), st.sampled_from([1, 2, 8]), st.integers(0, 2**31))
def test_parallel_equivalence_property(L, n, seed):
    rng = np.random.default_rng(seed)
    A, B, C = stable_params(rng, L, n=n)
    x = rng.standard_normal(L)
    ref = ssm_scan_sequential(A, B, C, x)
    scale = max(1.0, np.abs(ref).max())
    assert np.max(np.abs(ssm_scan_parallel(A, B, C, x) - ref)) <= 1e-10 * scale


def test_long_sequence_state_stays_bounded():
    rng = np.random.default_rng(4)
    L = 10_000
    a = np.exp(-rng.uniform(0.01, 1.0, (L, 4))).astype(np.float32)
    b = rng.uniform(-1, 1, (L, 4)).astype(np.float32)
    h = affine_scan_parallel(a, b)
    assert np.all(np.isfinite(h))
    assert np.max(np.abs(h - affine_scan_sequential(a, b))) < 1e-4
    # |h_t| <= sum_k |b| * max(a)^k <= 1 / (1 - max a)
    assert np.abs(h).max() <= 1.0 / (1.0 - a.max()) + 1e-3


# ------------------------------------------------------------ bidirectional
def test_bidirectional_with_silent_backward_is_forward():
    rng = np.random.default_rng(5)
    pf = stable_params(rng, 9)
    A, B, _ = stable_params(rng, 9)
    x = rng.standard_normal(9)
    out = bidirectional_scan(pf, (A, B, np.zeros_like(B)), x)
    assert np.array_equal(out, ssm_scan_parallel(*pf, x))


def test_bidirectional_palindrome():
    rng = np.random.default_rng(6)
    L = 11
    half = stable_params(rng, (L + 1) // 2, n=3)
    # time-symmetric parameters so that the forward scan of x equals the backward scan of reversed x
    p = tuple(np.concatenate([h, h[-2::-1]]) for h in half)
    x = rng.standard_normal((L + 1) // 2)
    x = np.concatenate([x, x[-2::-1]])
    y = bidirectional_scan(p, p, x)
    assert np.allclose(y, y[::-1], rtol=1e-12, atol=1e-12)


def test_bidirectional_is_composition_of_two_oracles():
    rng = np.random.default_rng(7)
    pf = stable_params(rng, 17, n=2)
    pb = stable_params(rng, 17, n=2)
    x = rng.standard_normal(17)
    expected = ssm_scan_sequential(*pf, x) + ssm_scan_sequential(*pb, x[::-1])[::-1]
    assert np.allclose(bidirectional_scan(pf, pb, x), expected, rtol=1e-12, atol=1e-12)


# ----------------------------------------------------------------- orders
def test_yzx_hand_enumeration():
    v = np.arange(8).reshape(2, 2, 2, 1)  # memory index = 4z + 2y + x
    tokens, _ = scan_order_transform(v, "yzx")
    # y fastest, then z, then x
    assert tokens.ravel().tolist() == [0, 2, 4, 6, 1, 3, 5, 7]
    assert np.array_equal(tokens.ravel(), v[..., 0].transpose(2, 0, 1).ravel())
    assert scan_order_transform(v, "zxy")[0].ravel().tolist() == [0, 4, 1, 5, 2, 6, 3, 7]
    assert scan_order_transform(v, "xyz")[0].ravel().tolist() == list(range(8))


def test_xyz_on_a_row_is_memory_order():
    v = np.random.default_rng(8).standard_normal((1, 1, 7, 2))
    tokens, _ = scan_order_transform(v, "xyz")
    assert np.array_equal(tokens, v.reshape(7, 2))


def test_unknown_order():
    with pytest.raises(ValueError):
        scan_order_transform(np.zeros((2, 2, 2, 1)), "xzy")


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 4), st.integers(0, 999))
def test_order_round_trip(shape, seed):
    v = np.random.default_rng(seed).standard_normal(shape)
    for order in ORDERS:
        tokens, inverse = scan_order_transform(v, order)
        assert tokens.shape == (shape[0] * shape[1] * shape[2], shape[3])
        assert inverse(tokens).tobytes() == v.tobytes()


# ------------------------------------------------------------------ blocks
@pytest.fixture
def net64():
    cfg = TriDirConfig(channels=2, state_dim=2, blocks=1)
    p = init_tridir(cfg, np.random.default_rng(9), np.float64)
    return cfg, p


def test_block_with_zero_fusion_is_identity(net64):
    _, p = net64
    p["block0.fuse.w"][:] = 0
    v = np.random.default_rng(10).standard_normal((3, 4, 5, 2))
    assert np.array_equal(tridir_block_forward(p, v), v)


def rotate_params(p):
    """Parameters for the volume transposed (z, y, x) -> (y, x, z).

    On the transposed volume the xyz order visits voxels like zxy on the
    original, yzx like xyz, and zxy like yzx.
    """
    source = {"xyz": "zxy", "yzx": "xyz", "zxy": "yzx"}
    q = dict(p)
    C = p["block0.norm"].shape[0]
    for new, old in source.items():
        for k, val in p.items():
            if k.startswith(f"block0.{old}."):
                q[k.replace(f"block0.{old}.", f"block0.{new}.")] = val
    w = p["block0.fuse.w"]
    blocks = {d: w[i * C:(i + 1) * C] for i, d in enumerate(ORDERS)}
    q["block0.fuse.w"] = np.concatenate([blocks[source[d]] for d in ORDERS])
    return q


def test_block_axis_permutation_equivariance():
    p = init_tridir(TriDirConfig(channels=3, state_dim=2, blocks=1), np.random.default_rng(11), np.float64)
    v = np.random.default_rng(12).standard_normal((2, 3, 4, 3))
    rho = (1, 2, 0, 3)
    lhs = tridir_block_forward(rotate_params(p), v.transpose(rho))
    rhs = tridir_block_forward(p, v).transpose(rho)
    assert np.max(np.abs(lhs - rhs)) < 1e-5


def test_single_voxel_block_hand_evaluation(net64):
    _, p = net64
    v = np.array([0.4, -1.3]).reshape(1, 1, 1, 2)
    u = (v - v.mean()) / np.sqrt(v.var() + 1e-5) * p["block0.norm"]
    u = u.reshape(2)

    def softplus(a):
        return np.log1p(np.exp(a))

    dirs = []
    for d in ORDERS:
        z = u @ p[f"block0.{d}.w_in"]
        y = np.zeros(2)
        for side in ("fwd", "bwd"):
            s = f"block0.{d}.{side}"
            dt = softplus(z @ p[f"{s}.w_dt"] + p[f"{s}.b_dt"])
            h = np.outer(dt * z, z @ p[f"{s}.w_b"])  # L = 1: h = B_bar x
            y = y + h @ (z @ p[f"{s}.w_c"])
        dirs.append(y @ p[f"block0.{d}.w_out"])
    expected = v.reshape(2) + np.concatenate(dirs) @ p["block0.fuse.w"] + p["block0.fuse.b"]
    assert np.allclose(tridir_block_forward(p, v).reshape(2), expected, rtol=1e-12, atol=1e-12)


def test_block_residual_bounded_by_fusion_operator_norm(net64):
    _, p = net64
    v = Tensor(np.random.default_rng(13).standard_normal((1, 3, 4, 4, 2)))
    leaves = {k: Tensor(a) for k, a in p.items()}
    out, dirs = _block(v, leaves, "block0", return_dirs=True)
    feats = np.concatenate([d.data for d in dirs], axis=-1)
    bound = np.linalg.norm(p["block0.fuse.w"], 2) * np.linalg.norm(feats)
    assert np.linalg.norm(out.data - v.data) <= bound + 1e-12


# --------------------------------------------------------------------- net
def test_fresh_net_is_identity():
    p = init_tridir(TriDirConfig(), np.random.default_rng(14))
    v = np.random.default_rng(15).uniform(-1, 1, (4, 8, 8)).astype(np.float32)
    assert enhance_volume(p, v).tobytes() == v.tobytes()
    batch = np.random.default_rng(16).uniform(-1, 1, (3, 2, 4, 4)).astype(np.float32)
    assert enhance_volume(p, batch).tobytes() == batch.tobytes()


def test_zero_block_net_is_identity():
    p = init_tridir(TriDirConfig(blocks=0), np.random.default_rng(17))
    v = np.random.default_rng(18).uniform(-1, 1, (2, 3, 3)).astype(np.float32)
    assert enhance_volume(p, v).tobytes() == v.tobytes()


def test_enhance_rejects_bad_inputs():
    p = init_tridir(TriDirConfig(blocks=1), np.random.default_rng(19))
    with pytest.raises(ValueError):
        enhance_volume(p, np.full((2, 2, 2), 3.0))
    with pytest.raises(ValueError):
        enhance_volume(p, np.zeros((2, 2)))


def test_tridir_gradients_match_finite_differences(net64):
    _, p = net64
    rng = np.random.default_rng(20)
    p["proj.w"][:] = rng.standard_normal(2)
    p["proj.b"][:] = 0.1
    v = rng.uniform(-1, 1, (4, 4, 4))
    up = rng.standard_normal((4, 4, 4))

    def f(params):
        return float(np.sum(enhance_volume(params, v) * up))

    analytic = tridir_backward(p, v, up)
    numeric = numerical_grads(f, p)
    err, where = max_relative_error(analytic, numeric)
    assert err < 1e-4, where


def test_zero_upstream_gives_zero_gradients(net64):
    _, p = net64
    p["proj.w"][:] = 1.0
    v = np.random.default_rng(21).uniform(-1, 1, (2, 2, 2))
    grads = tridir_backward(p, v, np.zeros_like(v))
    assert all(not np.any(g) for g in grads.values())


def test_fusion_gradient_is_correlation_with_upstream(net64):
    _, p = net64
    rng = np.random.default_rng(22)
    feats = rng.standard_normal((1, 2, 3, 4, 2))
    up = rng.standard_normal(feats.shape)
    leaves = {k: Tensor(a, requires_grad=True) for k, a in p.items()}
    out, dirs = _block(Tensor(feats), leaves, "block0", return_dirs=True)
    out.backward(up)
    d = np.concatenate([t.data for t in dirs], axis=-1).reshape(-1, 6)
    assert np.allclose(leaves["block0.fuse.w"].grad, d.T @ up.reshape(-1, 2), rtol=1e-12, atol=1e-12)
