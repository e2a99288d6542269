import pytest

from lossnet.config import COMMANDS, ConfigError, ExperimentConfig, parse_config
from lossnet.models import Closed, MobileSplit, Open

OPEN = """
model: {family: open, capacity: 2, lam: 0.8}
integrate: {T: 5}
"""


def errors_of(text, command=None):
    with pytest.raises(ConfigError) as info:
        parse_config(text, command)
    return info.value.errors


def test_minimal_open_integrate():
    cfg = parse_config(OPEN, "integrate")
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.build_model() == Open(2, 0.8)
    assert cfg.block("integrate").T == 5.0
    assert cfg.seed == 0


def test_command_from_file():
    cfg = parse_config("command: equilibria\n" + OPEN)
    assert cfg.command == "equilibria"
    assert cfg.block("equilibria").per_axis == 24


def test_closed_load_at_capacity_rejected():
    errs = errors_of("model: {family: closed, capacity: 2, lam: 2.0}", "equilibria")
    assert len(errs) == 1
    assert "lam" in errs[0] and "C=2" in errs[0]


def test_unknown_key_suggests_fix():
    errs = errors_of("model: {family: closed, capacity: 2, lamda: 1.0}", "equilibria")
    assert any("lamda" in e and "did you mean 'lam'" in e for e in errs)
    errs = errors_of(OPEN + "integrat: {T: 1}\n", "integrate")
    assert any("did you mean 'integrate'" in e for e in errs)
    errs = errors_of(OPEN.replace("T: 5", "tol: 1e-9, TT: 5"), "integrate")
    assert any("integrate.TT" in e and "did you mean 'T'" in e for e in errs)


def test_every_error_reported():
    errs = errors_of("seed: -1\nmodel: {family: open, capacity: 0, lam: 0.5}\nintegrate: {T: -1}", "integrate")
    joined = "\n".join(errs)
    assert "seed" in joined and "capacity" in joined and "integrate.T" in joined
    assert len(errs) == 3


def test_syntax_and_shape_errors():
    assert "syntax error" in errors_of("model: [unclosed")[0]
    assert errors_of("- a\n- b") == ["top level must be a mapping"]
    assert "no command" in errors_of(OPEN)[0]
    assert "unknown command" in errors_of(OPEN, "plot")[0]


def test_missing_command_block():
    assert errors_of(OPEN, "simulate") == ["simulate: block missing from config"]
    assert errors_of(OPEN, "sweep") == ["sweep: block missing from config"]


def test_family_parameter_checks():
    text = "model: {family: mobile_split, capacity: 3, lam: [1.0], requirements: [1], mu: [0.5], gamma: [1.0]}"
    assert parse_config(text, "verify").build_model() == MobileSplit(3, [1], [1.0], [0.5], [1.0])
    assert "needs gamma" in errors_of(text.replace(", gamma: [1.0]", ""), "verify")[0]
    assert "takes no mu" in errors_of("model: {family: open, capacity: 2, lam: 0.5, mu: [1.0]}", "verify")[0]
    assert "family" in errors_of("model: {family: ring, capacity: 2, lam: 0.5}", "verify")[0]


def test_verify_suite_selection():
    base = "model: {family: closed, capacity: 3, lam: 1.0}\n"
    cfg = parse_config(base + "verify: {suites: [erlang, conservation]}", "verify")
    assert cfg.block("verify").suites == ["erlang", "conservation"]
    assert "suite selection is empty" in errors_of(base + "verify: {suites: []}", "verify")[0]
    assert "did you mean 'entropy'" in errors_of(base + "verify: {suites: [entropie]}", "verify")[0]


def test_exit_times_alias_and_sweep_range():
    text = (
        "model: {family: rerouting, capacity: 40, lam: 30.0}\n"
        "exit-times: {Ns: [50, 100], region: {kind: slow_mode, fraction: 0.3}}\n"
        "sweep: {values: {start: 1.0, stop: 2.0, num: 3}, capacities: [4, 5]}\n"
    )
    cfg = parse_config(text, "exit-times")
    assert cfg.block("exit-times").region.kind == "slow_mode"
    assert parse_config(text, "sweep").sweep.values.num == 3
    dumped = cfg.model_dump(mode="json", by_alias=True, exclude_none=True)
    assert "exit-times" in dumped


def test_all_commands_accept_a_full_config():
    text = """
model: {family: closed, capacity: 3, lam: 1.5}
integrate: {}
equilibria: {}
simulate: {N: 10, T: 1}
exit-times: {Ns: [10]}
quasipotential: {y1: [0.25, 0.25, 0.25, 0.25]}
verify: {}
sweep: {values: [1.0, 1.5]}
"""
    for command in COMMANDS:
        assert parse_config(text, command).command == command
    assert parse_config(text, "verify").build_model() == Closed(3, 1.5)
