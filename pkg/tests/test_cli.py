from pathlib import Path

import pytest

from hetpar import simnet
from hetpar.cli import (
    EXIT_DEADLOCK,
    EXIT_OK,
    EXIT_PARITY,
    EXIT_PARSE,
    EXIT_VALIDATION,
    main,
    render_traffic,
    run_experiment,
)
from hetpar.config import ParseError, ValidationError, parse_config, render_config
from hetpar.grid import Placement
from hetpar.sched import DispatchTable, render_dispatch
from hetpar.tinymodel import load_params

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
GOLDEN = Path(__file__).parent / "golden"

LEFT = (CONFIGS / "noncolocated.cfg").read_text()
RIGHT = (CONFIGS / "colocated.cfg").read_text()
FIG4A = (CONFIGS / "two_encoders.cfg").read_text()


def test_parse_left_panel():
    cfg = parse_config(LEFT)
    lang, img = cfg.layouts["language"], cfg.layouts["images"]
    assert (lang.tp, lang.pp, lang.dp, lang.rank_offset) == (2, 2, 1, 0)
    assert (img.tp, img.pp, img.dp, img.rank_offset) == (1, 1, 4, 4)
    assert cfg.placements() == {"images->language": Placement.NON_COLOCATED}
    assert cfg.world_size == 8


def test_parse_right_panel():
    cfg = parse_config(RIGHT)
    assert cfg.placements() == {"images->language": Placement.COLOCATED}
    assert cfg.world_size == 8


def test_dp3_is_indivisible():
    text = LEFT.replace("data_parallel_size = 4\nrank_offset = 4", "data_parallel_size = 3\nrank_offset = 4")
    with pytest.raises(ValidationError, match="IndivisibleBatch"):
        parse_config(text)


@pytest.mark.parametrize(
    "text,line",
    [
        ("[module.language]\ntensor_model_parallel_size = two\n", 2),
        ("[model]\nd_h = 8\n[bogus]\n", 3),
        ("d_h = 8\n", 1),
        ("[run]\nsteps = 1\nsteps = 2\n", 3),
        ("[module.language]\nrank_offset = 1.5\n", 2),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        parse_config(text)
    assert info.value.line == line


def test_validation_errors():
    with pytest.raises(ValidationError, match="language"):
        parse_config("[module.images]\ndata_parallel_size = 1\n")
    with pytest.raises(ValidationError, match="encoder"):
        parse_config("[module.language]\ndata_parallel_size = 1\n")
    mixed = FIG4A.replace("[module.e2]\nrank_offset = 5", "[module.e2]\nrank_offset = 0")
    with pytest.raises(ValidationError):
        parse_config(mixed)


def test_scientific_notation_and_comments():
    cfg = parse_config(LEFT + "\n[model]\nlearning_rate = 5e-2   # trailing comment\ntanh = 0\n")
    assert cfg.model.learning_rate == 0.05
    assert cfg.model.activation == "identity"


@pytest.mark.parametrize("text", [LEFT, RIGHT, FIG4A, LEFT + "[model]\ntanh = 0\n[run]\n".replace("[run]\n", "")])
def test_render_round_trip(text):
    cfg = parse_config(text)
    rendered = render_config(cfg)
    again = parse_config(rendered)
    assert again == cfg
    assert render_config(again) == rendered


def test_trainable_flags_round_trip():
    cfg = parse_config(LEFT.replace("seed = 0", "seed = 0\ntrainable.images.encoder = 0"))
    assert cfg.run.trainable == {"images.encoder": False}
    assert parse_config(render_config(cfg)) == cfg


# -- run modes ------------------------------------------------------------------------


def test_parity_on_right_panel():
    report = run_experiment(parse_config(RIGHT), "parity")
    assert report.exit_code == EXIT_OK
    summary = [line for line in report.text.splitlines() if line.startswith("kind=summary")]
    assert summary and "passed=1" in summary[0]
    max_dev = float(summary[0].split("max_deviation=")[1])
    assert max_dev <= 1e-10


def test_dispatch_fig4a_matches_golden():
    report = run_experiment(parse_config(FIG4A), "dispatch")
    assert report.exit_code == EXIT_OK
    assert report.text == (GOLDEN / "fig4a_dispatch.txt").read_text()


def test_dispatch_colocated_shows_phases():
    text = run_experiment(parse_config(RIGHT), "dispatch").text
    assert text.startswith("phase 1:") and "phase 2:" in text and "phase 3:" in text


def test_empty_table_renders_header_only():
    table = DispatchTable((), [], 1)
    lines = render_dispatch(table).splitlines()
    assert len(lines) == 2 and lines[0].startswith("call | phase")


def test_traffic_fan_in_bytes():
    cfg = parse_config(LEFT)
    text = run_experiment(cfg, "traffic").text
    section = text.split("[bridge:images->language]\n")[1].split("[")[0]
    width = cfg.model.vision_width
    expected = cfg.run.global_batch * width * simnet.ELEMENT_BYTES
    assert f"fwd  messages=8 bytes={expected}" in section
    assert f"bwd  messages=8 bytes={expected}" in section


def test_traffic_sections_sorted():
    fab = simnet.Fabric()

    def prog(rank):
        if rank == 0:
            yield simnet.Send(1, "zeta", [1.0])
            yield simnet.Send(1, "alpha", [1.0, 2.0])
        else:
            yield simnet.Recv(0, "zeta")
            yield simnet.Recv(0, "alpha")

    fab.run({0: prog(0), 1: prog(1)})
    text = render_traffic(fab.ledger_snapshot())
    assert text.index("[alpha]") < text.index("[zeta]")
    assert text.endswith("total messages=2 bytes=24\n")


@pytest.mark.parametrize("mode", ["parity", "dispatch", "traffic", "trace"])
@pytest.mark.parametrize("cfg_text", [LEFT, RIGHT, FIG4A], ids=["left", "right", "fig4a"])
def test_reports_are_deterministic(mode, cfg_text):
    a = run_experiment(parse_config(cfg_text), mode)
    b = run_experiment(parse_config(cfg_text), mode)
    assert a.text == b.text and a.checkpoint == b.checkpoint


# -- exit codes through main ------------------------------------------------------------


def _write(tmp_path, text, name="x.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_main_success_writes_out_and_checkpoint(tmp_path):
    out, ck = tmp_path / "report.txt", tmp_path / "params.txt"
    code = main(["--config", _write(tmp_path, LEFT), "--mode", "parity", "--steps", "2", "--out", str(out), "--checkpoint", str(ck)])
    assert code == EXIT_OK
    assert out.read_text().startswith("step 0:")
    assert "step 1:" in out.read_text()
    assert set(load_params(ck.read_text())) == {
        "images.encoder", "images.projector", *(f"language.layer{i}.fc{j}" for i in range(4) for j in (1, 2))
    }


def test_main_parse_error(tmp_path, capsys):
    assert main(["--config", _write(tmp_path, "[run\n"), "--mode", "parity"]) == EXIT_PARSE
    assert "line 1" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.cfg"), "--mode", "parity"]) == EXIT_PARSE


def test_main_validation_error(tmp_path):
    text = LEFT.replace("data_parallel_size = 4\nrank_offset = 4", "data_parallel_size = 3\nrank_offset = 4")
    assert main(["--config", _write(tmp_path, text), "--mode", "parity"]) == EXIT_VALIDATION
    assert main(["--config", _write(tmp_path, LEFT), "--mode", "parity", "--steps", "0"]) == EXIT_VALIDATION


def test_main_negative_tolerance(tmp_path):
    code = main(["--config", _write(tmp_path, LEFT), "--mode", "parity", "--tolerance", "-1"])
    assert code == EXIT_VALIDATION


def test_main_parity_failure_code(tmp_path, monkeypatch):
    import hetpar.cli as cli

    real = cli.oracle_step

    def skewed(*args, **kwargs):
        state = real(*args, **kwargs)
        state.loss += 1.0
        return state

    monkeypatch.setattr(cli, "oracle_step", skewed)
    assert main(["--config", _write(tmp_path, LEFT), "--mode", "parity"]) == EXIT_PARITY


def test_main_deadlock_code(tmp_path, monkeypatch):
    import hetpar.cli as cli

    def stuck(cfg, mode):
        fab = simnet.Fabric()

        def waiter():
            yield simnet.Recv(1, "never")

        fab.run({0: waiter()})

    monkeypatch.setattr(cli, "run_experiment", stuck)
    assert main(["--config", _write(tmp_path, LEFT), "--mode", "trace"]) == EXIT_DEADLOCK


def test_exit_codes_are_distinct():
    assert len({EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_PARITY, EXIT_DEADLOCK, 2}) == 6
