"""Command-line pipeline tests on miniature problems."""

import os

import numpy as np
import pytest
import yaml

from oraslearn import evalcli
from oraslearn.ddm import FactorizationFailure, build, stationary_solve
from oraslearn.evalcli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    METHOD_LEARNED1,
    METHOD_LEARNED2,
    METHOD_RAS1,
    METHOD_RAS2,
    METHODS,
    ConfigError,
    EvalReport,
    EvalRow,
    evaluate_grid,
    load_config,
    loss_config,
    main,
    resolve_workers,
    run_eval,
    train_config,
    write_report,
)
from oraslearn.mggnn import ModelConfig, init_params, save_checkpoint
from oraslearn.train import TrainConfig, make_dataset


TINY = {
    "seed": 3,
    "run_dir": None,  # filled per test
    "data": {
        "train_grids": 2,
        "node_min": 130,
        "node_max": 160,
        "test_grids": 2,
        "test_node_min": 130,
        "test_node_max": 160,
    },
    "train": {"epochs": 1, "batch": 2, "hidden": 8, "layers": 1, "hops": 2},
    "loss": {"K": 3, "m": 5, "gamma": 1e-3},
    "eval": {"dense_rho_max": 250},
    "scaling": {"sizes": [130, 160], "runs": 2},
}


def write_tiny_config(tmp_path, **patch):
    cfg = yaml.safe_load(yaml.safe_dump(TINY))
    cfg["run_dir"] = str(tmp_path / "run")
    for key, val in patch.items():
        section, _, field = key.partition(".")
        if field:
            cfg[section][field] = val
        else:
            cfg[section] = val
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


# ---------------------------------------------------------------------------
# configuration


def test_load_config_merges_defaults(tmp_path):
    path = write_tiny_config(tmp_path)
    cfg = load_config(path)
    assert cfg["data"]["train_grids"] == 2
    assert cfg["train"]["lr"] == 5e-4
    assert cfg["loss"]["variant"] == "softmax_trace"
    assert cfg["eval"]["tol"] == 1e-8


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("daat:\n  train_grids: 3\n")
    with pytest.raises(ConfigError, match="unknown config key: daat"):
        load_config(str(path))


def test_load_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(str(path))


def test_load_config_rejects_bad_values(tmp_path):
    path = write_tiny_config(tmp_path, **{"train.epochs": 0})
    with pytest.raises(ConfigError):
        load_config(path)


def test_load_config_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.yaml")


def test_overrides_apply_with_yaml_types(tmp_path):
    path = write_tiny_config(tmp_path)
    cfg = load_config(path, overrides=[
        "train.epochs=4",
        "loss.gamma=1e-2",
        "data.test_sizes=[100, 200]",
        "run_dir=elsewhere",
    ])
    assert cfg["train"]["epochs"] == 4
    assert cfg["loss"]["gamma"] == pytest.approx(1e-2)
    assert cfg["data"]["test_sizes"] == [100, 200]
    assert cfg["run_dir"] == "elsewhere"


def test_override_rejects_unknown_and_malformed(tmp_path):
    path = write_tiny_config(tmp_path)
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(path, overrides=["train.epoochs=4"])
    with pytest.raises(ConfigError, match="key.path=value"):
        load_config(path, overrides=["train.epochs"])
    with pytest.raises(ConfigError, match="section"):
        load_config(path, overrides=["train={}"])


def test_typed_views_carry_all_fields(tmp_path):
    cfg = load_config(write_tiny_config(tmp_path))
    tcfg = train_config(cfg)
    assert tcfg.n_grids == 2
    assert tcfg.hidden == 8
    assert tcfg.loss.K == 3
    lcfg = loss_config(cfg)
    assert lcfg.gamma == pytest.approx(1e-3)


def test_resolve_workers_env_override(tmp_path, monkeypatch):
    cfg = load_config(write_tiny_config(tmp_path))
    assert resolve_workers(cfg) == 1
    monkeypatch.setenv(evalcli.WORKERS_ENV, "3")
    assert resolve_workers(cfg) == 3
    monkeypatch.setenv(evalcli.WORKERS_ENV, "zero")
    with pytest.raises(ConfigError):
        resolve_workers(cfg)


# ---------------------------------------------------------------------------
# report model


def make_row(grid=0, method=METHOD_RAS1, **patch):
    row = EvalRow(grid=grid, n=100, S=2, method=method, stationary_iters=10,
                  fgmres_iters=5, rho=0.5, wall_seconds=0.1)
    for key, val in patch.items():
        setattr(row, key, val)
    return row


def test_report_rejects_duplicate_rows():
    rows = [make_row(), make_row()]
    with pytest.raises(ValueError, match="duplicate"):
        EvalReport(rows=rows, stationary_sentinel=501, fgmres_sentinel=301)


def test_report_allows_same_method_different_variant():
    rows = [make_row(variant="a"), make_row(variant="b")]
    report = EvalReport(rows=rows, stationary_sentinel=501,
                        fgmres_sentinel=301)
    assert len(report.rows) == 2


def test_sentinel_fraction_counts_either_solver():
    rows = [
        make_row(grid=0),
        make_row(grid=1, stationary_iters=501),
        make_row(grid=2, fgmres_iters=301),
        make_row(grid=3),
    ]
    report = EvalReport(rows=rows, stationary_sentinel=501,
                        fgmres_sentinel=301)
    assert report.sentinel_fraction() == pytest.approx(0.5)


def test_write_report_schema_and_rho_blank(tmp_path):
    rows = [make_row(grid=0), make_row(grid=1, rho=None)]
    report = EvalReport(rows=rows, stationary_sentinel=501,
                        fgmres_sentinel=301)
    path = tmp_path / "report.csv"
    write_report(path, report)
    lines = path.read_text().splitlines()
    assert lines[0] == "grid,n,S,method,stationary_iters,fgmres_iters,rho"
    assert lines[1] == f"0,100,2,{METHOD_RAS1},10,5,0.5"
    assert lines[2].endswith(",")


# ---------------------------------------------------------------------------
# grid evaluation


@pytest.fixture(scope="module")
def tiny_grid():
    cfg = TrainConfig(n_grids=1, node_min=130, node_max=160)
    ((_, system, d),) = make_dataset(cfg, seed=5)
    return system, d


EV = {"tol": 1e-8, "stationary_max_iter": 500, "fgmres_max_iter": 300,
      "dense_rho_max": 250}


def test_evaluate_grid_zero_init_matches_classical(tiny_grid):
    system, d = tiny_grid
    mcfg = ModelConfig(hidden=8, layers=1, hops=2)
    params = init_params(mcfg, seed=0)
    rows = evaluate_grid(0, system, d, params, mcfg, EV, seed=0)
    assert [r.method for r in rows] == list(METHODS)
    by = {r.method: r for r in rows}
    # zero-initialized heads emit L = 0 and the classical interpolation
    assert by[METHOD_LEARNED1].stationary_iters == \
        by[METHOD_RAS1].stationary_iters
    assert by[METHOD_LEARNED2].stationary_iters == \
        by[METHOD_RAS2].stationary_iters
    assert by[METHOD_LEARNED2].fgmres_iters == by[METHOD_RAS2].fgmres_iters
    for row in rows:
        assert row.rho is not None and 0 < row.rho < 1
        assert row.n == system.A.n_rows and row.S == d.S
        assert row.wall_seconds > 0


def test_evaluate_grid_skips_rho_above_ceiling(tiny_grid):
    system, d = tiny_grid
    ev = dict(EV, dense_rho_max=10)
    rows = evaluate_grid(0, system, d, None, None, ev, seed=0,
                         methods=(METHOD_RAS2,))
    assert rows[0].rho is None


def test_evaluate_grid_needs_checkpoint_for_learned(tiny_grid):
    system, d = tiny_grid
    with pytest.raises(ValueError, match="checkpoint"):
        evaluate_grid(0, system, d, None, None, EV, seed=0)


def test_evaluate_grid_records_sentinel_and_continues(tiny_grid):
    system, d = tiny_grid
    ev = dict(EV, stationary_max_iter=1, fgmres_max_iter=1)
    rows = evaluate_grid(0, system, d, None, None, ev, seed=0,
                         methods=(METHOD_RAS1, METHOD_RAS2))
    assert [r.stationary_iters for r in rows] == [2, 2]
    assert [r.fgmres_iters for r in rows] == [2, 2]


def test_evaluate_grid_factorization_failure_fills_sentinels(
        tiny_grid, monkeypatch):
    system, d = tiny_grid
    mcfg = ModelConfig(hidden=8, layers=1, hops=2)
    params = init_params(mcfg, seed=0)

    def failing_build(a, dd, L=None, P=None, levels="two"):
        if L is not None:
            raise FactorizationFailure("singular subdomain")
        return build(a, dd, L=L, P=P, levels=levels)

    monkeypatch.setattr(evalcli, "build", failing_build)
    rows = evaluate_grid(0, system, d, params, mcfg, EV, seed=0)
    by = {r.method: r for r in rows}
    assert by[METHOD_LEARNED2].stationary_iters == 501
    assert by[METHOD_LEARNED2].fgmres_iters == 301
    assert by[METHOD_LEARNED2].rho is None
    assert by[METHOD_RAS2].stationary_iters < 501


# ---------------------------------------------------------------------------
# subcommands end to end


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + train once; individual tests reuse the artifacts."""
    tmp_path = tmp_path_factory.mktemp("pipeline")
    config = write_tiny_config(tmp_path)
    assert main(["gen-data", "--config", config]) == EXIT_OK
    assert main(["train", "--config", config]) == EXIT_OK
    return tmp_path, config


def test_gen_data_layout(pipeline):
    tmp_path, _ = pipeline
    train_dir = tmp_path / "run" / "data" / "train"
    test_dir = tmp_path / "run" / "data" / "test"
    assert sorted(os.listdir(train_dir)) == [
        "grid_0000.mesh", "grid_0000.part", "grid_0001.mesh",
        "grid_0001.part",
    ]
    assert len(os.listdir(test_dir)) == 4


def test_train_artifacts(pipeline):
    tmp_path, _ = pipeline
    model_dir = tmp_path / "run" / "model"
    assert (model_dir / "model.ckpt").is_file()
    assert (model_dir / "history.csv").is_file()
    header = (model_dir / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,mean_loss,wall_seconds,skips"


def test_eval_writes_report_and_charts(pipeline):
    tmp_path, config = pipeline
    assert main(["eval", "--config", config]) == EXIT_OK
    out = tmp_path / "run" / "eval"
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "grid,n,S,method,stationary_iters,fgmres_iters,rho"
    assert len(lines) == 1 + 2 * len(METHODS)
    methods = [line.split(",")[3] for line in lines[1:]]
    assert methods == list(METHODS) * 2
    assert (out / "timings.csv").is_file()
    assert (out / "stationary.svg").read_text().startswith("<svg")
    assert (out / "fgmres.svg").is_file()


def test_eval_report_deterministic(pipeline):
    tmp_path, config = pipeline
    out = tmp_path / "run" / "eval" / "report.csv"
    assert main(["eval", "--config", config]) == EXIT_OK
    first = out.read_bytes()
    assert main(["eval", "--config", config]) == EXIT_OK
    assert out.read_bytes() == first


def test_eval_worker_pool_matches_serial(pipeline, monkeypatch):
    tmp_path, config = pipeline
    out = tmp_path / "run" / "eval" / "report.csv"
    assert main(["eval", "--config", config]) == EXIT_OK
    serial = out.read_bytes()
    monkeypatch.setenv(evalcli.WORKERS_ENV, "2")
    assert main(["eval", "--config", config]) == EXIT_OK
    assert out.read_bytes() == serial


def test_eval_missing_checkpoint_is_config_exit(tmp_path, capsys):
    config = write_tiny_config(tmp_path)
    assert main(["gen-data", "--config", config]) == EXIT_OK
    code = main(["eval", "--config", config])
    assert code == EXIT_CONFIG
    assert "checkpoint" in capsys.readouterr().err


def test_train_without_data_is_config_exit(tmp_path, capsys):
    config = write_tiny_config(tmp_path)
    assert main(["train", "--config", config]) == EXIT_CONFIG
    assert "gen-data" in capsys.readouterr().err


def test_bad_override_is_config_exit(tmp_path, capsys):
    config = write_tiny_config(tmp_path)
    code = main(["gen-data", "--config", config, "--set", "train.epochs=0"])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_eval_divergence_dominated_exit(pipeline):
    tmp_path, config = pipeline
    code = main([
        "eval", "--config", config,
        "--set", "eval.stationary_max_iter=1",
        "--set", "eval.fgmres_max_iter=1",
    ])
    assert code == EXIT_DIVERGED


def test_scaling_writes_raw_rows_and_chart(pipeline):
    tmp_path, config = pipeline
    assert main(["scaling", "--config", config]) == EXIT_OK
    out = tmp_path / "run" / "scaling"
    lines = (out / "scaling.csv").read_text().splitlines()
    assert lines[0] == "n_target,n,S,run,forward_seconds,featurize_seconds"
    assert len(lines) == 1 + 2 * 2
    for line in lines[1:]:
        assert float(line.split(",")[4]) > 0
    assert (out / "scaling.svg").is_file()


def test_ablate_sparsity_table(pipeline):
    tmp_path, config = pipeline
    assert main(["ablate", "--config", config, "--axis", "sparsity"]) == \
        EXIT_OK
    lines = (
        tmp_path / "run" / "ablate" / "sparsity.csv"
    ).read_text().splitlines()
    assert lines[0] == \
        "variant,grid,n,S,method,stationary_iters,fgmres_iters,rho"
    variants = {line.split(",")[0] for line in lines[1:]}
    assert variants == {"classical", "neighbors", "own-only"}
    # two baselines and one learned method on each of the two grids
    assert len(lines) == 1 + 2 * 2 + 2 * 2


def test_ablate_unknown_axis_rejected(pipeline, capsys):
    _, config = pipeline
    with pytest.raises(SystemExit):
        main(["ablate", "--config", config, "--axis", "nonsense"])


def test_verify_writes_suite_table(tmp_path):
    config = write_tiny_config(tmp_path)
    assert main(["verify", "--config", config]) == EXIT_OK
    lines = (
        tmp_path / "run" / "verify" / "verify.csv"
    ).read_text().splitlines()
    assert lines[0] == "name,passed,detail,seconds"
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["surrogate-accuracy", "sampling-bounds", "gradient-check"]
    assert all(line.split(",")[1] == "True" for line in lines[1:])


def test_run_eval_requires_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_eval(str(tmp_path), None, EV, seed=0, methods=(METHOD_RAS1,))
