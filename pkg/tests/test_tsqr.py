"""Tests for local QR, butterfly/binomial TSQR, apply-Q, and message traces."""

import numpy as np
import pytest

from ttpar.comm import SerialComm, run_spmd
from ttpar.errors import CapabilityError, ContractError, NumericError, ShapeError
from ttpar.tsqr import local_qr, message_trace, tsqr_apply_q, tsqr_factor


def row_blocks(a, nranks):
    """Split by the contiguous ceil-sized block rule used everywhere."""
    m = a.shape[0]
    chunk = -(-m // nranks)
    return [a[p * chunk : min((p + 1) * chunk, m)] for p in range(nranks)]


def reference_qr(a):
    """Sequential sign-fixed thin QR oracle built on numpy only."""
    q, r = np.linalg.qr(a)
    s = np.where(np.diagonal(r) < 0, -1.0, 1.0)
    return q * s[None, :], r * s[:, None]


def tsqr_gathered(a, nranks, variant="butterfly", c=None):
    """Run TSQR over a simulated group; gather Q rows and R."""
    blocks = row_blocks(a, nranks)
    b = a.shape[1]

    def body(comm):
        fac, r = tsqr_factor(blocks[comm.rank], comm, variant=variant)
        rhs = np.eye(b) if c is None else c
        q_loc = tsqr_apply_q(fac, rhs, comm)
        return q_loc, r

    run = run_spmd(nranks, body)
    q = np.vstack([res[0] for res in run.results])
    rs = [res[1] for res in run.results if res[1] is not None]
    return q, rs, run


def test_local_qr_sign_convention_and_roundtrip():
    """R has a nonnegative diagonal and Q'R reproduces the block."""
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = int(rng.integers(5, 60))
        b = int(rng.integers(1, min(m, 9)))
        a = rng.standard_normal((m, b))
        fac, r = local_qr(a)
        assert (np.diagonal(r) >= 0).all()
        assert np.allclose(np.tril(r, -1), 0)
        assert np.allclose(fac.apply(r), a, rtol=1e-12, atol=1e-13)
        q = fac.explicit_q()
        assert np.allclose(q.T @ q, np.eye(b), atol=1e-12)
        assert np.allclose(q @ r, a, rtol=1e-12, atol=1e-13)


def test_local_qr_matches_reference():
    """Sign-fixed R agrees with the numpy oracle for full-rank inputs."""
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.standard_normal((30, 6))
        _, r = local_qr(a)
        _, r_ref = reference_qr(a)
        assert np.allclose(r, r_ref, rtol=1e-12, atol=1e-13)


def test_local_qr_short_and_empty_blocks():
    """Blocks with fewer rows than columns (even zero) still yield b x b R."""
    rng = np.random.default_rng(2)
    a = rng.standard_normal((2, 5))
    fac, r = local_qr(a)
    assert r.shape == (5, 5)
    assert np.allclose(fac.apply(r), a, atol=1e-13)
    fac0, r0 = local_qr(np.zeros((0, 4)))
    assert r0.shape == (4, 4) and not r0.any()
    assert fac0.apply(np.eye(4)).shape == (0, 4)


def test_local_qr_rejects_nonfinite():
    """NaN/inf inputs raise numeric errors instead of propagating garbage."""
    a = np.ones((4, 2))
    a[1, 1] = np.nan
    with pytest.raises(NumericError):
        local_qr(a)
    with pytest.raises(ShapeError):
        local_qr(np.ones(4))


@pytest.mark.parametrize("nranks", [2, 3, 5, 8])
def test_tsqr_matches_sequential_qr(nranks):
    """Distributed R and gathered Q match the sequential factorization."""
    rng = np.random.default_rng(10 + nranks)
    a = rng.standard_normal((120, 7))
    q_ref, r_ref = reference_qr(a)
    q, rs, _ = tsqr_gathered(a, nranks)
    for r in rs:
        assert np.allclose(r, r_ref, rtol=1e-12, atol=1e-12)
    assert np.allclose(q, q_ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("variant", ["butterfly", "binomial"])
@pytest.mark.parametrize("nranks", list(range(1, 10)))
def test_variant_equivalence(nranks, variant):
    """Both trees give the same R and the same gathered Q for P = 1..9."""
    rng = np.random.default_rng(100 + nranks)
    m = int(rng.integers(nranks * 3 + 8, 512))
    b = int(rng.integers(1, 17))
    a = rng.standard_normal((m, b))
    q_ref, r_ref = reference_qr(a)
    q, rs, _ = tsqr_gathered(a, nranks, variant=variant)
    assert len(rs) >= 1  # binomial: root only
    for r in rs:
        assert np.allclose(r, r_ref, rtol=1e-13, atol=1e-13 * np.abs(r_ref).max())
    assert np.allclose(q, q_ref, atol=1e-13 * max(1.0, np.abs(q_ref).max()))
    assert np.allclose(q.T @ q, np.eye(b), atol=1e-12)


def test_apply_general_block_roundtrip():
    """Q @ [C; 0] for a random C equals the dense product with gathered Q."""
    rng = np.random.default_rng(3)
    a = rng.standard_normal((90, 5))
    c = rng.standard_normal((5, 3))
    q, _, _ = tsqr_gathered(a, 4)
    got, _, _ = tsqr_gathered(a, 4, c=c)
    assert np.allclose(got, q @ c, atol=1e-12)


def test_r_is_distribution_invariant():
    """Bitwise-identical R regardless of P (sign fixing makes R unique)."""
    rng = np.random.default_rng(4)
    a = rng.standard_normal((96, 6))
    rs = {}
    for nranks in (1, 2, 3, 4, 8):
        _, r_list, _ = tsqr_gathered(a, nranks)
        rs[nranks] = r_list[0]
    for nranks, r in rs.items():
        assert np.allclose(r, rs[1], rtol=1e-13, atol=1e-14), nranks


def test_butterfly_redundancy_invariant():
    """Tree nodes agree across ranks p = q (mod 2^level) for P in {4, 8}."""
    rng = np.random.default_rng(5)
    for nranks in (4, 8):
        a = rng.standard_normal((nranks * 6, 4))
        blocks = row_blocks(a, nranks)

        def body(comm):
            fac, _ = tsqr_factor(blocks[comm.rank], comm)
            return {node.level: node.fac.qr for node in fac.tree}

        run = run_spmd(nranks, body)
        for level in range((nranks).bit_length() - 1):
            for p in range(nranks):
                for q in range(p + 1, nranks):
                    if (p - q) % (1 << level) == 0:
                        assert np.array_equal(
                            run.results[p][level], run.results[q][level]
                        ), (nranks, level, p, q)


def test_butterfly_message_counts():
    """P=8: 3 exchange rounds in factor, zero messages in apply."""
    rng = np.random.default_rng(6)
    a = rng.standard_normal((64, 4))
    blocks = row_blocks(a, 8)

    def body(comm):
        with comm.trace.phase("factor"):
            fac, _ = tsqr_factor(blocks[comm.rank], comm)
        with comm.trace.phase("apply"):
            tsqr_apply_q(fac, np.eye(4), comm)
        return None

    _, _, run = tsqr_gathered(a, 8)  # warm path; now the traced run:
    run = run_spmd(8, body)
    per_rank = message_trace(run)
    for rank, phases in enumerate(per_rank):
        assert phases.get("factor", (0, 0))[0] == 3, (rank, phases)
        assert phases.get("apply", (0, 0)) == (0, 0), (rank, phases)


def test_nonpowitwo_message_counts_and_levels():
    """P=5: remainder pair exchanges once in apply; tree levels as documented."""
    rng = np.random.default_rng(7)
    a = rng.standard_normal((60, 3))
    blocks = row_blocks(a, 5)

    def body(comm):
        fac, _ = tsqr_factor(blocks[comm.rank], comm)
        with comm.trace.phase("apply"):
            tsqr_apply_q(fac, np.eye(3), comm)
        return len(fac.tree), fac.star is not None

    run = run_spmd(5, body)
    levels = [res[0] for res in run.results]
    has_star = [res[1] for res in run.results]
    assert levels == [2, 2, 2, 2, 0]
    assert has_star == [True, False, False, False, False]
    per_rank = message_trace(run)
    apply_msgs = [phases.get("apply", (0, 0))[0] for phases in per_rank]
    assert apply_msgs == [1, 0, 0, 0, 1]


def test_apply_identity_fast_path_flops():
    """P=1 explicit Q via the triangular route costs 2mb^2 + O(b^3), not 4mb^2."""
    rng = np.random.default_rng(8)
    m, b = 4000, 16
    a = rng.standard_normal((m, b))
    comm = SerialComm()
    fac, _ = tsqr_factor(a, comm)
    comm.trace.reset()
    q = tsqr_apply_q(fac, np.eye(b), comm)
    flops = comm.trace.total("flops")
    assert abs(flops - 2 * m * b * b) < 0.2 * m * b * b
    assert np.allclose(q.T @ q, np.eye(b), atol=1e-12)
    # dense block: full dormqr cost
    comm.trace.reset()
    tsqr_apply_q(fac, rng.standard_normal((b, b)), comm)
    flops_dense = comm.trace.total("flops")
    assert abs(flops_dense - 4 * m * b * b) < 0.2 * m * b * b


def test_factor_requires_matching_communicator():
    """Applying a multi-rank factor with the wrong comm is a contract error."""
    rng = np.random.default_rng(9)
    a = rng.standard_normal((40, 3))
    blocks = row_blocks(a, 2)

    def body(comm):
        fac, _ = tsqr_factor(blocks[comm.rank], comm)
        return fac

    run = run_spmd(2, body)
    with pytest.raises(ContractError):
        tsqr_apply_q(run.results[0], np.eye(3), SerialComm())
    with pytest.raises(ContractError):
        tsqr_apply_q(run.results[0], np.eye(3), None)
    with pytest.raises(ContractError):
        tsqr_factor(a, SerialComm(), variant="bogus")


def test_message_trace_requires_sim_run():
    """message_trace rejects anything that is not a simulated run."""
    with pytest.raises(CapabilityError):
        message_trace("not a run")
