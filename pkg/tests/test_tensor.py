"""
Unit tests for the tensor engine and the finite-difference oracle.

Covers construction contracts, dtype handling, reverse-mode gradients of
every primitive op, gradient accumulation and the gradient checker itself.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src import tensor as T
from src.errors import ContractError, DimensionError, NumericalError
from src.gradcheck import finite_diff_check
from src.tensor import Tensor, backward, default_dtype, no_grad


def _make_param(shape: tuple[int, ...], seed: int = 0, scale: float = 1.0) -> Tensor:
    """Random float64 parameter tensor."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


# ── Construction Tests ─────────────────────────────────────────────────────

class TestTensorConstruction:
    """Tests for tensor creation contracts."""

    def test_zero_extent_rejected(self) -> None:
        """A tensor with an empty axis should raise ContractError."""
        with pytest.raises(ContractError):
            Tensor(np.zeros((0, 3)))

    def test_non_finite_rejected(self) -> None:
        """NaN values should raise NumericalError at construction."""
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])

    def test_op_producing_inf_raises(self) -> None:
        """log(0) produces -inf, which the op result must refuse."""
        x = Tensor([0.0, 1.0], requires_grad=True)
        with np.errstate(divide="ignore"), pytest.raises(NumericalError):
            T.log(x)

    def test_float_leaves_use_default_dtype(self) -> None:
        """Leaves built from Python floats take the default float64 dtype."""
        assert Tensor([1.0, 2.0]).dtype == np.float64

    def test_integer_constants_keep_integer_dtype(self) -> None:
        """Integer data without requires_grad stays integral."""
        assert np.issubdtype(Tensor([1, 2, 3]).dtype, np.integer)

    def test_default_dtype_context_restores(self) -> None:
        """default_dtype should switch precision only inside the block."""
        with default_dtype("float32"):
            assert Tensor([1.0]).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64

    def test_unsupported_default_dtype(self) -> None:
        """Only float32 and float64 are valid defaults."""
        with pytest.raises(ContractError):
            T.set_default_dtype(np.float16)

    def test_as_tensor_matches_like_dtype(self) -> None:
        """Constants combined with a float32 tensor should stay float32."""
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        assert (x * 2.0).dtype == np.float32

    def test_item_requires_single_element(self) -> None:
        """item() on a vector should raise ContractError."""
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()


# ── Backward Tests ─────────────────────────────────────────────────────────

class TestBackward:
    """Tests for reverse-mode differentiation."""

    def test_shared_use_accumulates(self) -> None:
        """d/dx (x*x + x) = 2x + 1 when x is used three times."""
        x = Tensor([1.5, -2.0], requires_grad=True)
        backward((x * x + x).sum())
        np.testing.assert_allclose(x.grad, [4.0, -3.0])

    def test_broadcast_gradient_is_summed(self) -> None:
        """A bias broadcast over rows receives the column sums."""
        a = _make_param((3, 4))
        b = Tensor(np.zeros(4), requires_grad=True)
        backward((a + b).sum())
        np.testing.assert_allclose(b.grad, np.full(4, 3.0))

    def test_leaf_gradients_accumulate_across_calls(self) -> None:
        """Two backward passes add up until zero_grad."""
        x = Tensor([2.0], requires_grad=True)
        backward((x * 3.0).sum())
        backward((x * 3.0).sum())
        assert x.grad[0] == pytest.approx(6.0)
        x.zero_grad()
        assert x.grad is None

    def test_repeated_index_scatter_adds(self) -> None:
        """Gathering the same row twice doubles its gradient."""
        x = Tensor(np.arange(3.0), requires_grad=True)
        backward(x[np.array([0, 0, 1])].sum())
        np.testing.assert_allclose(x.grad, [2.0, 1.0, 0.0])

    def test_non_scalar_loss_rejected(self) -> None:
        """backward() needs a scalar."""
        x = _make_param((2,))
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_constant_loss_rejected(self) -> None:
        """A loss that depends on no parameter is not on the tape."""
        with pytest.raises(ContractError):
            backward(Tensor([1.0]).sum())

    def test_no_grad_builds_constants(self) -> None:
        """Inside no_grad results carry no parents."""
        x = _make_param((2,))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.is_leaf

    def test_tape_is_in_execution_order(self) -> None:
        """Tape nodes are sorted by creation sequence."""
        x = _make_param((2,))
        y = T.tanh(x) * 2.0
        tape = backward(y.sum())
        seqs = [node._seq for node in tape.nodes]
        assert seqs == sorted(seqs)
        assert len(tape) == 4

    def test_straight_through_passes_gradient(self) -> None:
        """straight_through forwards new values but routes g to the source."""
        x = _make_param((3,))
        y = T.straight_through(x, np.ones(3))
        np.testing.assert_allclose(y.data, np.ones(3))
        backward((y * Tensor([1.0, 2.0, 3.0])).sum())
        np.testing.assert_allclose(x.grad, [1.0, 2.0, 3.0])

    def test_matmul_shape_mismatch(self) -> None:
        """Inner extents must agree."""
        with pytest.raises(DimensionError):
            _make_param((2, 3)) @ _make_param((2, 3))


# ── Finite-Difference Tests ────────────────────────────────────────────────

class TestGradientOracle:
    """Tests comparing analytic gradients to central differences."""

    @pytest.mark.parametrize(
        "fn",
        [
            lambda a, b: (T.softmax(a @ b, axis=-1) * T.tanh(a @ b)).sum(),
            lambda a, b: T.log_softmax(a @ b, axis=-1).mean(),
            lambda a, b: T.gelu(a @ b).sum() / (T.exp(b).sum() + 1.0),
            lambda a, b: T.sqrt((a * a).sum(axis=1) + 1.0).sum() + T.sigmoid(b).mean(),
            lambda a, b: T.concat([a, b.T[:2]], axis=0).reshape(-1).sum() ** 2,
            lambda a, b: T.transpose(a @ b, (1, 0)).mean(axis=0).sum() - (a ** 3).sum(),
        ],
    )
    def test_ops_match_central_differences(self, fn) -> None:
        """Every op's backward should agree with finite differences."""
        a = _make_param((3, 4), seed=1, scale=0.5)
        b = _make_param((4, 5), seed=2, scale=0.5)
        report = finite_diff_check(lambda: fn(a, b), [a, b], max_coords_per_param=None)
        assert report.passed, report
        assert report.checked == a.size + b.size

    def test_wrong_backward_is_detected(self) -> None:
        """A custom op with a halved derivative should fail the check."""
        x = _make_param((4,), seed=3)

        def squared(a: Tensor) -> Tensor:
            return T.apply_op(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")

        report = finite_diff_check(lambda: squared(x).sum(), [x])
        assert not report.passed
        assert report.max_rel_error > 0.1

    def test_coordinate_sampling_caps_checks(self) -> None:
        """Large parameters are checked on a sample of coordinates."""
        x = _make_param((10, 10))
        report = finite_diff_check(lambda: (x * x).sum(), [x], max_coords_per_param=7)
        assert report.checked == 7
        assert report.passed
