from moving_hw.context import Context


def test_context_init() -> None:
    context = Context(seed=11, strict=True)
    assert context.seed == 11
    assert context.strict is True


def test_context_init_with_env_vars(monkeypatch) -> None:
    monkeypatch.setenv("SEED", "42")
    monkeypatch.setenv("MAX_WORKERS", "3")
    monkeypatch.setenv("STRICT", "yes")
    monkeypatch.setenv("OUTPUT_DIR", "results")
    context = Context()
    assert context.seed == 42
    assert context.max_workers == 3
    assert context.strict is True
    assert context.output_dir == "results"


def test_context_init_with_env_vars_and_passed_values(monkeypatch) -> None:
    monkeypatch.setenv("SEED", "42")
    context = Context(seed=5)
    assert context.seed == 5
