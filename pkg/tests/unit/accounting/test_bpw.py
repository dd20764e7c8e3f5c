"""Unit tests for per-layer storage formulas, rank selection and model reports."""

import math
from fractions import Fraction

import pytest

from binfactor.accounting.bpw import (
    BaselineParams,
    Method,
    RankPolicy,
    baseline_layer_bits,
    bpw_baseline,
    bpw_binfactor,
    bpw_dbf,
    factorized_layer_bits,
    index_bits_per_group,
    model_report,
    rank_for_target_bpw,
    rank_quantum,
)
from binfactor.accounting.shapes import SHIPPED_MODELS, LayerShape, ModelShape, load_shipped_shape
from binfactor.utils.exceptions import (
    InvalidRankError,
    InvalidSalientCountError,
    TargetTooSmallError,
    UnsupportedMethodError,
    ValidationError,
)
from tests.utils.oracles import arb_rc_layout, billm_layout, hbllm_col_layout, hbllm_row_layout, stbllm_layout


class TestFactorizedBpw:
    """Two-scale and three-scale factorized formats."""

    @pytest.mark.parametrize(
        ("n", "m", "r", "expected"),
        [(64, 64, 16, 1.0), (4096, 4096, 2032, 1.0), (2, 2, 1, 17.0), (2, 2, 2, 18.0)],
    )
    def test_binfactor_examples(self, n, m, r, expected):
        assert bpw_binfactor(n, m, r) == expected

    def test_dbf_stores_rank_scale(self):
        assert bpw_dbf(64, 64, 16) == 1.0625

    def test_binfactor_is_cheaper_than_dbf(self):
        for n, m, r in [(8, 8, 1), (64, 32, 16), (4096, 11008, 1000)]:
            assert bpw_binfactor(n, m, r) < bpw_dbf(n, m, r)

    def test_littlebit_matches_dbf(self):
        assert factorized_layer_bits(Method.LITTLEBIT, 10, 20, 3) == factorized_layer_bits(Method.DBF, 10, 20, 3)

    def test_zero_rank(self):
        with pytest.raises(InvalidRankError):
            bpw_dbf(64, 64, 0)

    def test_baseline_is_not_factorized(self):
        with pytest.raises(UnsupportedMethodError):
            factorized_layer_bits(Method.BILLM, 4, 4, 1)

    def test_nonpositive_dimensions(self):
        with pytest.raises(ValidationError):
            bpw_binfactor(0, 4, 1)


class TestBaselineBits:
    """Closed-form baseline storage against explicit layouts."""

    @pytest.mark.parametrize(
        ("params", "expected"),
        [
            (BaselineParams(method=Method.BILLM), 2.8752),
            (BaselineParams(method=Method.STBLLM, sparsity_n=6, sparsity_m=8), 4.0002),
            (BaselineParams(method=Method.ARB_RC), 2.5081),
        ],
    )
    def test_square_4096_examples(self, params, expected):
        assert bpw_baseline(params, 4096, 4096) == pytest.approx(expected, abs=5e-5)

    def test_index_bits(self):
        assert [index_bits_per_group(n, 8) for n in (4, 6, 8)] == [7, 5, 0]

    def test_layouts_agree_with_formulas(self, rng):
        for _ in range(50):
            n = 2 * int(rng.integers(1, 40))
            m = 8 * int(rng.integers(1, 40))
            c = 8 * int(rng.integers(0, min(m, 48) // 8 + 1))
            k = int(rng.choice([16, 64, 128]))
            cases = [
                (BaselineParams(method=Method.BILLM, c=c, k=k), billm_layout(n, m, c, k)),
                (BaselineParams(method=Method.ARB_RC, c=c, k=k), arb_rc_layout(n, m, c, k)),
                (BaselineParams(method=Method.HBLLM_ROW, c=c, k=k), hbllm_row_layout(n, m, c, k)),
                (BaselineParams(method=Method.HBLLM_COL, c=c, k=k), hbllm_col_layout(n, m, c, k)),
            ]
            for keep in (4, 6, 8):
                params = BaselineParams(method=Method.STBLLM, c=c, k=k, sparsity_n=keep, sparsity_m=8)
                cases.append((params, stbllm_layout(n, m, c, k, keep, 8)))

            for params, layout in cases:
                assert baseline_layer_bits(params, n, m) == sum(layout.values()), params

    def test_nondecreasing_in_salient_columns(self):
        for method, extra in [
            (Method.BILLM, {}),
            (Method.ARB_RC, {}),
            (Method.HBLLM_ROW, {}),
            (Method.HBLLM_COL, {}),
            (Method.STBLLM, {"sparsity_n": 4, "sparsity_m": 8}),
            (Method.STBLLM, {"sparsity_n": 8, "sparsity_m": 8}),
        ]:
            bits = [baseline_layer_bits(BaselineParams(method=method, c=c, **extra), 256, 512) for c in range(51)]
            assert bits == sorted(bits), method

    def test_fractional_bits(self):
        params = BaselineParams(method=Method.STBLLM, sparsity_n=4, sparsity_m=8)
        assert baseline_layer_bits(params, 1, 12) == Fraction(369, 2)

    @pytest.mark.parametrize(("c", "m"), [(51, 4096), (20, 10), (-1, 64)])
    def test_salient_count_out_of_range(self, c, m):
        with pytest.raises(InvalidSalientCountError):
            baseline_layer_bits(BaselineParams(method=Method.BILLM, c=c), 8, m)

    def test_stbllm_needs_pattern(self):
        with pytest.raises(ValidationError):
            baseline_layer_bits(BaselineParams(method=Method.STBLLM), 8, 8)

    def test_factorized_method_is_not_a_baseline(self):
        with pytest.raises(UnsupportedMethodError):
            baseline_layer_bits(BaselineParams(method=Method.BINFACTOR), 8, 8)


class TestRankForTarget:
    """Nearest-rank selection for a bitrate target."""

    @pytest.mark.parametrize(
        ("n", "m", "target", "expected"),
        [(64, 64, 1.0, 16), (4096, 4096, 1.0, 2032), (4096, 11008, 0.55, 1626)],
    )
    def test_examples(self, n, m, target, expected):
        assert rank_for_target_bpw(n, m, target) == expected

    def test_shipped_layers_land_within_one_quantum(self):
        for model in SHIPPED_MODELS:
            for layer in load_shipped_shape(model).layers:
                for target in (1.0, 0.8, 0.55):
                    # Act
                    r = rank_for_target_bpw(layer.n, layer.m, target)

                    # Assert
                    gap = abs(bpw_binfactor(layer.n, layer.m, r) - target)
                    assert gap <= rank_quantum(layer.n, layer.m), (model, layer.name, target)

    def test_clamped_to_smaller_dimension(self):
        assert rank_for_target_bpw(4, 4096, 64.0) == 4

    def test_small_layer_falls_back_to_rank_one(self):
        # bpw at rank 1 is 17/2 here, within twice the target
        assert rank_for_target_bpw(4, 4, 6.0) == 1

    def test_unreachable_target(self):
        with pytest.raises(TargetTooSmallError):
            rank_for_target_bpw(16, 12, 1.0)

    @pytest.mark.parametrize("target", [0.0, -1.0, math.inf, math.nan])
    def test_invalid_target(self, target):
        with pytest.raises(ValidationError):
            rank_for_target_bpw(64, 64, target)


class TestRankPolicy:
    def test_parse_fixed(self):
        assert RankPolicy.parse("fixed:8").rank == 8

    def test_parse_target(self):
        assert RankPolicy.parse("target:0.8").target_bpw == 0.8

    @pytest.mark.parametrize("text", ["fixed:x", "rank:4", "target", "fixed:0"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValidationError):
            RankPolicy.parse(text)

    def test_fixed_rank_too_large(self):
        with pytest.raises(InvalidRankError):
            RankPolicy(rank=9).rank_for(8, 16)


class TestModelReport:
    """Aggregation over replicas and the fp16 residual."""

    def test_fixed_rank_model(self):
        # Arrange
        shape = ModelShape(name="toy", layers=(LayerShape("a", 64, 64, 2),), residual_fp16_params=100)

        # Act
        report = model_report(shape, Method.BINFACTOR, rank_policy=RankPolicy(rank=16))

        # Assert
        assert report.per_layer_bits == [4096]
        assert report.ranks == [16]
        assert report.total_bits == 8192
        assert report.bpw == 1.0
        assert report.checkpoint_bits == 8192 + 1600
        assert report.size_gb == pytest.approx(9792 / 8 / 10**9)
        assert report.size_gib == pytest.approx(9792 / 8 / 2**30)

    def test_baseline_layers_round_up(self):
        # Arrange
        shape = ModelShape(name="toy", layers=(LayerShape("a", 1, 12, 3),))
        params = BaselineParams(method=Method.STBLLM, sparsity_n=4, sparsity_m=8)

        # Act
        report = model_report(shape, Method.STBLLM, params=params)

        # Assert
        assert report.per_layer_bits == [185]
        assert report.total_bits == 555

    def test_factorized_needs_policy(self):
        shape = ModelShape(name="toy", layers=(LayerShape("a", 4, 4),))
        with pytest.raises(ValidationError):
            model_report(shape, Method.BINFACTOR)
