import numpy as np
import pytest

from library.cropping import CropSpec
from library.exceptions import ParameterError
from library.suites import SuiteManager
from suites import BaseSuite, CheckResult, SuiteReport
from suites.align import crop_pixels, object_iou


@pytest.fixture
def manager(repo_root):
    return SuiteManager(f"{repo_root}/suites")


class TestSuiteManager:
    def test_ema_suite_passes(self, manager):
        (report,) = manager.run(["ema"])

        assert report.suite == "ema"
        assert report.passed, [check.name for check in report.failures]
        assert len(report.checks) == 7 * 3

    @pytest.mark.slow
    @pytest.mark.parametrize("name", ["grad", "warp", "align"])
    def test_suite_passes(self, manager, name):
        (report,) = manager.run([name])

        assert report.suite == name
        assert report.checks
        assert report.passed, [(check.name, check.value, check.detail) for check in report.failures]

    def test_aligned_crops_beat_random_crops(self, manager):
        suite = manager.load_suite("align")
        aligned, random = suite.trials(0)

        assert len(aligned) == len(random) == suite.config.options["trials"]
        assert aligned.mean() > random.mean()

    def test_unknown_suite(self, manager):
        with pytest.raises(ParameterError):
            manager.load_suite("speed")

    def test_loaded_suite_reads_its_config(self, manager):
        suite = manager.load_suite("ema")
        assert isinstance(suite, BaseSuite)
        assert suite.config.seeds == [0, 1, 2] and suite.config.tolerance == 0.0


class TestReport:
    def test_failures(self):
        report = SuiteReport("x", [CheckResult("a", True, 0.0, 1.0), CheckResult("b", False, 2.0, 1.0)])
        assert not report.passed
        assert [check.name for check in report.failures] == ["b"]

    def test_check_uses_tolerance(self, manager):
        suite = manager.load_suite("ema")
        assert suite.check("tight", 0.0).passed
        assert not suite.check("loose", 1e-3).passed
        assert suite.check("loose", 1e-3, tolerance=1e-2).passed


class TestAlign:
    def test_crop_pixels_use_centers(self):
        crop = CropSpec(1.0, 0.5, 2.0, 1.0, 3, 4)
        expected = np.zeros((3, 4), dtype=bool)
        expected[0, 1:3] = True
        np.testing.assert_array_equal(crop_pixels(crop), expected)

    def test_object_iou(self):
        obj = np.zeros((4, 4), dtype=bool)
        obj[:2, :2] = True
        assert object_iou(obj, CropSpec(0.0, 0.0, 2.0, 2.0, 4, 4)) == 1.0
        assert object_iou(obj, CropSpec(2.0, 2.0, 2.0, 2.0, 4, 4)) == 0.0
        assert object_iou(obj, CropSpec(1.0, 0.0, 2.0, 2.0, 4, 4)) == pytest.approx(2 / 6)
