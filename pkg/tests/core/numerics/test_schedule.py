# tests/core/numerics/test_schedule.py

import pytest

from src.core.errors import RangeError
from src.core.numerics import HyperParams, cooldown_start, wsd_lr_scale


def _hp(**overrides) -> HyperParams:
    values = {"warmup_steps": 100, "total_steps": 1000, "cooldown_fraction": 0.2}
    values.update(overrides)
    return HyperParams(**values)


class TestWsdSchedule:
    """Warmup, stable plateau, linear cooldown."""

    def setup_method(self):
        self.hp = _hp()

    def test_cooldown_start(self):
        assert cooldown_start(self.hp) == 800

    @pytest.mark.parametrize(
        "step,expected",
        [(0, 0.0), (50, 0.5), (100, 1.0), (500, 1.0), (800, 1.0), (900, 0.5)],
    )
    def test_phases(self, step, expected):
        assert wsd_lr_scale(step, self.hp) == pytest.approx(expected)

    def test_plateau_is_exactly_one(self):
        assert all(wsd_lr_scale(s, self.hp) == 1.0 for s in range(100, 801))

    def test_reaches_zero_at_end(self):
        assert wsd_lr_scale(1000, self.hp) == 0.0

    def test_monotone_cooldown(self):
        values = [wsd_lr_scale(s, self.hp) for s in range(800, 1001)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_no_warmup_starts_at_one(self):
        assert wsd_lr_scale(0, _hp(warmup_steps=0)) == 1.0

    def test_overlapping_ramps_take_the_smaller(self):
        hp = _hp(warmup_steps=100, total_steps=100, cooldown_fraction=0.5)
        assert wsd_lr_scale(60, hp) == pytest.approx(0.6)
        assert wsd_lr_scale(80, hp) == pytest.approx(0.4)

    @pytest.mark.parametrize("step", [-1, 1001])
    def test_out_of_range_step(self, step):
        with pytest.raises(RangeError, match="outside"):
            wsd_lr_scale(step, self.hp)

    def test_total_steps_required(self):
        with pytest.raises(RangeError, match="total_steps"):
            wsd_lr_scale(0, HyperParams())
