import pytest

from hitok import verify


class TestQuickChecks:
    def test_structural_constants(self) -> None:
        outcome = verify.structural_constants()
        assert outcome.passed, outcome.detail

    def test_prefix_sharing(self) -> None:
        outcome = verify.prefix_sharing(count=3)
        assert outcome.passed, outcome.detail

    def test_quantization_oracle(self) -> None:
        outcome = verify.quantization_oracle(cases=50)
        assert outcome.passed, outcome.detail

    def test_dpo_arithmetic(self) -> None:
        outcome = verify.dpo_arithmetic()
        assert outcome.passed, outcome.detail

    def test_gradients(self) -> None:
        outcome = verify.gradients(samples=4)
        assert outcome.passed, outcome.detail

    def test_causality(self) -> None:
        outcome = verify.causality(trials=4)
        assert outcome.passed, outcome.detail


class TestRun:
    def test_only(self) -> None:
        (result,) = verify.run(only=["structural-constants"])
        assert result.name == "structural-constants"
        assert result.suite == "quick"
        assert result.passed
        assert result.seconds >= 0.0

    def test_unknown_check(self) -> None:
        with pytest.raises(KeyError):
            verify.run(only=["no-such-check"])

    def test_raising_check_fails(self, monkeypatch: pytest.MonkeyPatch) -> None:
        def broken() -> verify.Outcome:
            raise RuntimeError("boom")

        monkeypatch.setitem(verify._REGISTRY, "broken", ("quick", broken))
        (result,) = verify.run(only=["broken"])
        assert not result.passed
        assert result.detail == "RuntimeError: boom"

    def test_failing_check(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setitem(verify._REGISTRY, "failing", ("quick", lambda: verify.Outcome(False, "nope")))
        (result,) = verify.run(only=["failing"])
        assert (result.passed, result.detail) == (False, "nope")


class TestNames:
    def test_quick_excludes_trained_checks(self) -> None:
        quick = verify.names("quick")
        assert "structural-constants" in quick
        assert "scale-decodability" not in quick

    def test_full_includes_quick(self) -> None:
        assert set(verify.names("quick")) < set(verify.names("full"))
        assert {"scale-decodability", "toy-super-resolution", "dpo-margin", "allocation-tradeoff"} <= set(
            verify.names("full")
        )

    def test_unknown_suite(self) -> None:
        with pytest.raises(ValueError):
            verify.names("nightly")


@pytest.mark.slow
class TestFullChecks:
    @pytest.mark.parametrize(
        "name",
        [
            "prefix-sharing",
            "quantization-oracle",
            "monotone-residuals",
            "gradients",
            "causality",
            "scale-decodability",
            "toy-super-resolution",
            "dpo-margin",
            "allocation-tradeoff",
        ],
    )
    def test_check(self, name: str) -> None:
        (result,) = verify.run("full", only=[name])
        assert result.passed, result.detail
