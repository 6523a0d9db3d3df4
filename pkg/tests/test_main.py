"""Tests for adaptive_gsfg.__main__ module."""

import logging
import os
from unittest.mock import patch

import pytest
from exceptiongroup import BaseExceptionGroup

from adaptive_gsfg.__main__ import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    cli,
    configure_logging,
    dispatch,
    extract_root_cause,
    format_pole,
    log_error,
)
from adaptive_gsfg.errors import AlgebraicLoop, Diverged, SemanticError
from adaptive_gsfg.scenario import summary_from_text

GAIN = """\
[sim]
name = "gain"
duration = 2
dt = 0.01
window = 0.5

[learning]
gamma = 1

[reference]
tf: num=[2], den=[1]

[input]
node = 1

[node 1]

[node 2]
output = true

[branch 1 2]
weight = 0.5
adaptive = true
label = "K"
"""

LOOP = """\
[reference]
tf: num=[1], den=[1]

[input]
node = 1

[node 1]

[node 2]
output = true

[branch 1 2]
weight = 1

[branch 2 1]
weight = 0.5
"""


@pytest.fixture(autouse=True)
def restore_root_logger():
    level, handlers = logging.root.level, list(logging.root.handlers)
    yield
    logging.root.setLevel(level)
    logging.root.handlers[:] = handlers


@pytest.fixture
def gain_file(tmp_path):
    path = tmp_path / "gain.gsfg"
    path.write_text(GAIN, encoding="utf-8")
    return path


class TestCLI:
    """Test CLI argument parsing."""

    def test_cli_run_with_all_args(self):
        """Test parsing of the run command with every option."""
        args = cli(
            [
                "--debug",
                "run",
                "stable_plant",
                "--csv",
                "out.csv",
                "--summary",
                "out.txt",
                "--gamma",
                "2.5",
                "--dt",
                "0.002",
                "--mode",
                "full",
            ]
        )

        assert args.command == "run"
        assert args.scenario == "stable_plant"
        assert args.csv == "out.csv"
        assert args.summary == "out.txt"
        assert args.gamma == 2.5
        assert args.dt == 0.002
        assert args.mode == "full"
        assert args.debug is True
        assert args.silent is False

    def test_cli_with_minimal_args(self):
        """Test parsing with only a command and a scenario."""
        with patch.dict(os.environ, {}, clear=True):
            args = cli(["validate", "stable_plant"])

        assert args.command == "validate"
        assert args.debug is False
        assert args.silent is False

    def test_cli_sweep_args(self):
        """Test parsing of the sweep command."""
        args = cli(["sweep", "stable_plant", "--gamma-from", "1", "--gamma-to", "9", "--steps", "5"])

        assert args.gamma_from == 1.0
        assert args.gamma_to == 9.0
        assert args.steps == 5
        assert args.workers is None

    def test_cli_env_var_fallback(self):
        """Test that debug logging falls back to GSFG_DEBUG."""
        with patch.dict(os.environ, {"GSFG_DEBUG": "true"}):
            args = cli(["poles", "stable_plant"])

        assert args.debug is True

    def test_cli_env_var_ignored_values(self):
        """Test that other GSFG_DEBUG values keep debug logging off."""
        with patch.dict(os.environ, {"GSFG_DEBUG": "maybe"}):
            args = cli(["poles", "stable_plant"])

        assert args.debug is False

    def test_cli_requires_command(self):
        """Test that a missing command is a usage error."""
        with pytest.raises(SystemExit) as exc_info:
            cli([])
        assert exc_info.value.code == 2

    def test_cli_silent_and_debug_conflict(self):
        """Test that --silent and --debug are mutually exclusive."""
        with pytest.raises(SystemExit):
            cli(["--silent", "--debug", "validate", "stable_plant"])


class TestLogging:
    """Test logging configuration and error mapping."""

    @pytest.mark.parametrize(
        ("flags", "level"),
        [
            ([], logging.INFO),
            (["--debug"], logging.DEBUG),
            (["--silent"], logging.ERROR),
        ],
    )
    def test_configure_logging_levels(self, flags, level):
        """Test the root log level for each verbosity option."""
        with patch.dict(os.environ, {}, clear=True):
            configure_logging(cli([*flags, "validate", "stable_plant"]))
        assert logging.root.level == level

    def test_log_error_runtime(self):
        """Test that numerical failures map to status 1."""
        assert log_error(AlgebraicLoop([1, 2, 1])) == EXIT_FAILURE

    def test_log_error_value(self):
        """Test that configuration errors map to status 2."""
        assert log_error(SemanticError("missing [reference] section")) == EXIT_USAGE

    def test_log_error_os(self):
        """Test that file system errors map to status 2."""
        assert log_error(FileNotFoundError("nope.csv")) == EXIT_USAGE

    def test_log_error_unexpected(self, caplog):
        """Test that unexpected errors are logged with a traceback."""
        with caplog.at_level(logging.ERROR):
            assert log_error(KeyError("boom")) == EXIT_FAILURE
        assert caplog.records[-1].exc_info is not None

    def test_log_error_exception_group(self):
        """Test that nested groups are unwrapped to their root cause."""
        group = BaseExceptionGroup("outer", [BaseExceptionGroup("inner", [SemanticError("bad")])])
        assert log_error(group) == EXIT_USAGE

    def test_extract_root_cause_multiple(self):
        """Test that a group with several causes is returned unchanged."""
        group = BaseExceptionGroup("many", [ValueError("a"), RuntimeError("b")])
        assert extract_root_cause(group) is group


class TestFormatPole:
    """Test pole formatting."""

    def test_real_pole(self):
        """Test that real poles print without an imaginary part."""
        assert format_pole(complex(-2.0, 1e-12)) == "-2.0000"

    def test_complex_pole(self):
        """Test that complex poles carry a signed imaginary part."""
        assert format_pole(complex(-1.7941, -0.7362)) == "-1.7941-0.7362j"


class TestCommands:
    """Test the subcommands end to end."""

    def test_validate(self, capsys):
        """Test validation of a shipped scenario."""
        assert dispatch(["validate", "stable_plant"]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "stable_plant: ok (8 nodes, 10 branches, 3 adaptive)"

    def test_validate_missing_file(self):
        """Test that a missing scenario file is a usage error."""
        assert dispatch(["validate", "missing/nothing.gsfg"]) == EXIT_USAGE

    def test_validate_bad_scenario(self, tmp_path):
        """Test that a semantically invalid scenario is a usage error."""
        path = tmp_path / "bad.gsfg"
        path.write_text(GAIN.replace("[branch 1 2]", "[branch 1 7]"), encoding="utf-8")
        assert dispatch(["validate", str(path)]) == EXIT_USAGE

    def test_argument_error(self):
        """Test that argparse errors give status 2."""
        assert dispatch(["run", "stable_plant", "--gamma", "fast"]) == EXIT_USAGE

    def test_poles(self, capsys):
        """Test that the reference model poles are printed."""
        assert dispatch(["poles", "stable_plant"]) == EXIT_OK
        out = capsys.readouterr().out
        lines = out.splitlines()
        assert lines[0] == "reference:"
        reference = [complex(line.strip()) for line in lines[1:6]]
        assert min(abs(pole - (-93.7698)) for pole in reference) < 1e-3
        assert min(abs(pole - complex(-1.3210, 0.8984)) for pole in reference) < 1e-3
        assert "node 4:" in out

    def test_gradcheck(self, capsys):
        """Test that the sigmoid network passes the gradient check."""
        assert dispatch(["gradcheck", "sigmoid_network"]) == EXIT_OK
        assert "max relative error:" in capsys.readouterr().out

    def test_run_writes_csv_and_summary(self, gain_file, tmp_path):
        """Test a run with CSV and summary outputs."""
        csv_path = tmp_path / "trace.csv"
        summary_path = tmp_path / "summary.txt"
        status = dispatch(["run", str(gain_file), "--csv", str(csv_path), "--summary", str(summary_path)])

        assert status == EXIT_OK
        summary = summary_from_text(summary_path.read_text(encoding="utf-8"))
        assert summary["scenario"] == "gain"
        assert summary["status"] == "ok"
        assert "final_K" in summary
        assert len(csv_path.read_text(encoding="utf-8").splitlines()) == 201

    def test_run_summary_on_stdout(self, gain_file, capsys):
        """Test that overrides are echoed in the summary."""
        assert dispatch(["run", str(gain_file), "--gamma", "0"]) == EXIT_OK
        summary = summary_from_text(capsys.readouterr().out)
        assert summary["override_gamma"] == "0"
        assert summary["final_K"] == "0.5"

    @pytest.mark.parametrize("flags", [["--gamma", "-1"], ["--dt", "0"]])
    def test_run_bad_override(self, gain_file, flags):
        """Test that invalid overrides are usage errors."""
        assert dispatch(["run", str(gain_file), *flags]) == EXIT_USAGE

    def test_run_algebraic_loop(self, tmp_path):
        """Test that an algebraic loop is a scenario failure."""
        path = tmp_path / "loop.gsfg"
        path.write_text(LOOP, encoding="utf-8")
        assert dispatch(["run", str(path)]) == EXIT_FAILURE

    def test_run_diverged(self, gain_file, capsys, mocker):
        """Test that a divergence still prints a summary and gives status 1."""
        mocker.patch("adaptive_gsfg.__main__.run", side_effect=Diverged("node 2 diverged", node_id=2, time=1.5))
        assert dispatch(["run", str(gain_file)]) == EXIT_FAILURE
        summary = summary_from_text(capsys.readouterr().out)
        assert summary == {"scenario": "gain", "status": "diverged", "diverged_at": "1.5"}

    def test_run_weight_blowup(self, gain_file, tmp_path):
        """Test that a runaway gain ends the run with a diverged summary naming the branch."""
        summary_path = tmp_path / "summary.txt"
        csv_path = tmp_path / "trace.csv"
        status = dispatch(
            ["run", str(gain_file), "--gamma", "1e13", "--summary", str(summary_path), "--csv", str(csv_path)]
        )

        assert status == EXIT_FAILURE
        summary = summary_from_text(summary_path.read_text(encoding="utf-8"))
        assert list(summary)[:4] == ["scenario", "status", "diverged_at", "diverged_branch"]
        assert summary["status"] == "diverged"
        assert summary["diverged_at"] == "0.01"
        assert summary["diverged_branch"] == "1->2"
        assert summary["converged"] == "false"
        assert summary["override_gamma"] == "10000000000000"
        # header plus the one sample before the blow-up
        assert len(csv_path.read_text(encoding="utf-8").splitlines()) == 2

    def test_run_internal_error(self, gain_file, mocker):
        """Test that unexpected exceptions give status 1."""
        mocker.patch("adaptive_gsfg.__main__.run", side_effect=KeyError("boom"))
        assert dispatch(["run", str(gain_file)]) == EXIT_FAILURE

    def test_sweep(self, gain_file, capsys):
        """Test a small sweep through the CLI."""
        status = dispatch(["sweep", str(gain_file), "--gamma-from", "0", "--gamma-to", "2", "--steps", "3"])

        assert status == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert [line.split()[0] for line in lines[1:]] == ["0", "1", "2"]

    def test_sweep_bad_workers(self, gain_file):
        """Test that a non-positive worker count is a usage error."""
        status = dispatch(
            ["sweep", str(gain_file), "--gamma-from", "0", "--gamma-to", "1", "--steps", "2", "--workers", "0"]
        )
        assert status == EXIT_USAGE
