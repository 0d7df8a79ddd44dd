import copy
import re

import numpy as np
import pytest

from recupfl.attacks import asr
from recupfl.errors import ConfigError, NumericError
from recupfl.fl import run_rounds
from recupfl.harness import cli
from recupfl.harness import experiment as ex
from recupfl.harness.analysis import Curve, compare, compare_defenses, matched_grid, median_curve
from recupfl.harness.config import DefenseSection, bundled_config, config_from_dict, load_config
from recupfl.harness.plot import Axes, emit_plot, render_svg
from recupfl.harness.results import SWEEP_COLUMNS, TradeoffPoint, points_to_csv, read_points, write_points

BASE = {
    "experiment": {"seeds": [0]},
    "dataset": {"n_features": 8, "attributes": [["a0", 2]], "n_aux": 80, "n_clients": 12, "n_test": 40},
    "model": {"hidden": [6]},
    "fl": {"num_clients": 12, "rounds": 4, "lr": 0.5},
    "zoo": {"size": 4, "widths": [6], "depth": 1, "epochs": 5},
    "attack": {"adversaries": ["stru-nn", "random-forest"], "epochs": 5, "forest_trees": 5, "rounds": [1]},
    "recup": {"iterations": 2, "sampled": 2},
}


def make(**overrides):
    d = copy.deepcopy(BASE)
    for section, values in overrides.items():
        if isinstance(values, dict):
            d.setdefault(section, {}).update(values)
        else:
            d[section] = values
    return config_from_dict(d)


# --- configuration -------------------------------------------------------


def test_bundled_minimal_config_loads():
    cfg = load_config(bundled_config("minimal.toml"))
    assert cfg.seeds and cfg.defenses


def test_default_evaluation_rounds_are_first_middle_last():
    cfg = make(attack={"rounds": []}, fl={"rounds": 10})
    assert cfg.eval_rounds == (1, 5, 10)


def test_unknown_key_and_section_are_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        make(fl={"learning_rate": 0.1})
    with pytest.raises(ConfigError, match="unknown sections"):
        make(bogus={"x": 1})


def test_sweep_ranges_expand_and_respect_bounds():
    d = DefenseSection("dp-gaussian", range=(1e-3, 1e-1), steps=3)
    assert np.allclose(d.values, [1e-3, 1e-2, 1e-1])
    d = DefenseSection("sparsify", range=(0.0, 0.5), steps=3, scale="linear")
    assert d.values == (0.0, 0.25, 0.5)
    with pytest.raises(ConfigError):
        DefenseSection("sparsify", values=(1.0,))
    with pytest.raises(ConfigError):
        DefenseSection("dp-gaussian", values=(0.0,))
    with pytest.raises(ConfigError):
        DefenseSection("recup", values=(0.1,), range=(0.1, 0.2), steps=2)


def test_seeds_required():
    with pytest.raises(ConfigError):
        make(experiment={"seeds": []})


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[fl\nrounds = 3\n")
    with pytest.raises(ConfigError):
        load_config(bad)


# --- sweeps --------------------------------------------------------------


def test_single_value_single_seed_gives_rounds_times_adversaries_points():
    cfg = make(attack={"rounds": [1, 2, 4]}, defense=[{"kind": "clip", "values": [1.0]}])
    points = ex.run_sweep(cfg)
    assert len(points) == 3 * 2
    assert {(p.round, p.adversary) for p in points} == {(r, a) for r in (1, 2, 4) for a in ("stru-nn", "random-forest")}


def test_identity_defense_matches_undefended_adversary_exactly():
    cfg = make(defense=[{"kind": "none"}])
    points = ex.run_sweep(cfg)
    scn = ex.build_scenario(cfg, 0)
    art = ex.RoundArtifacts(scn, 1)
    u = np.stack([x.flat() for x in art.updates])
    for p in points:
        assert p.asr == asr(art.adversary(p.adversary, "a0"), u, art.labels("a0"))


def test_every_row_is_reproducible_in_isolation():
    full = ex.run_sweep(make(experiment={"seeds": [0, 1]}, defense=[{"kind": "recup", "values": [0.001, 0.01]}]))
    alone = ex.run_sweep(make(experiment={"seeds": [1]}, defense=[{"kind": "recup", "values": [0.01]}]))
    picked = [p for p in full if p.seed == 1 and p.param == 0.01]
    assert picked == alone


def test_rows_are_ordered_by_defense_then_param_then_seed():
    cfg = make(
        experiment={"seeds": [3, 1]},
        defense=[{"kind": "dp-gaussian", "values": [0.1, 0.01]}, {"kind": "none"}],
    )
    keys = [(p.defense, p.param, p.seed) for p in ex.run_sweep(cfg)]
    expected = [("dp-gaussian", 0.1, 3), ("dp-gaussian", 0.1, 1), ("dp-gaussian", 0.01, 3), ("dp-gaussian", 0.01, 1), ("none", 0.0, 3), ("none", 0.0, 1)]
    assert [k for i, k in enumerate(keys) if i % 2 == 0] == expected


def test_failing_cell_becomes_error_row_and_others_continue():
    cfg = make(defense=[{"kind": "soteria", "values": [0.5], "defend_layer": 7}, {"kind": "none"}])
    messages = []
    points = ex.run_sweep(cfg, log=messages.append)
    errors = [p for p in points if p.is_error]
    assert len(errors) == 1 and errors[0].defense == "soteria" and errors[0].asr is None
    assert len([p for p in points if p.defense == "none"]) == 2
    assert messages and "soteria" in messages[0]


def test_threads_do_not_change_results(monkeypatch):
    cfg = make(experiment={"seeds": [0, 1, 2]}, defense=[{"kind": "recup", "values": [0.01]}])
    monkeypatch.setenv("RECUP_THREADS", "0")
    a = points_to_csv(ex.run_sweep(cfg))
    monkeypatch.setenv("RECUP_THREADS", "3")
    b = points_to_csv(ex.run_sweep(cfg))
    assert a == b
    monkeypatch.setenv("RECUP_THREADS", "many")
    with pytest.raises(ConfigError):
        ex.run_sweep(cfg)


def test_variants_at_zero_budget_are_identical():
    cfg = make(ablation={"values": [0.0]})
    points = ex.run_variant_ablation(cfg)
    by_defense = {}
    for p in points:
        by_defense.setdefault(p.defense, []).append((p.round, p.adversary, p.asr, p.loss))
    assert set(by_defense) == {"recup", "fgsm-one-step", "fgsm-average", "fgsm-iterative", "fgsm-momentum"}
    first = by_defense["recup"]
    assert all(v == first for v in by_defense.values())


def test_zoo_size_below_q_is_a_config_error():
    with pytest.raises(ConfigError):
        ex.run_zoo_size_study(make(recup={"sampled": 3}, zoo_study={"values": [0.01]}), sizes=[2, 4])


def test_zoo_size_study_uses_nested_members():
    cfg = make(zoo_study={"values": [0.01]})
    scn = ex.build_scenario(cfg, 0)
    scn.zoo_capacity = 4
    small, large = scn.zoo("a0", 2), scn.zoo("a0", 4)
    for m_small, m_large in zip(small.members, large.members):
        assert all(np.array_equal(a, b) for a, b in zip(m_small.weights, m_large.weights))
    points = ex.run_zoo_size_study(cfg, sizes=[2, 4])
    assert {p.defense for p in points} == {"recup-zoo2", "recup-zoo4"}


def test_convergence_without_defense_matches_plain_training():
    cfg = make(convergence={"participation": [0.5], "rounds": 3})
    rows = ex.run_convergence(cfg)
    scn = ex.build_scenario(cfg, 0)
    from dataclasses import replace

    _, records = run_rounds(replace(scn.fl, participation_ratio=0.5, rounds=3), scn.spec, scn.clients, scn.test)
    none = [r.loss for r in rows if r.defense == "none"]
    assert none == [r.test_loss for r in records]
    assert len([r for r in rows if r.defense == "recup"]) == 3


def test_reconstruction_runner_reports_both_conditions():
    cfg = make(reconstruction={"input_dim": 6, "hidden": [4], "iterations": 20})
    out = ex.run_reconstruction(cfg)
    assert [o.defense for o in out] == ["none", "recup"]
    assert all(o.mse >= 0 and o.x_hat.shape == (6,) for o in out)


# --- CSV -----------------------------------------------------------------


def test_csv_header_and_round_trip(tmp_path):
    pts = [
        TradeoffPoint("recup", 0.01, 1, "stru-nn", 0.25, 0.7, None, 0),
        TradeoffPoint("none", 0.0, 2, "error", None, None, None, 1),
    ]
    path = write_points(pts, tmp_path / "x.csv")
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS) == "defense,param,round,adversary,asr,loss,mse,seed"
    assert text.splitlines()[2] == "none,0.0,2,error,,,,1"
    assert read_points(path) == pts


def test_point_invariants():
    with pytest.raises(ValueError):
        TradeoffPoint("x", 0.0, 1, "a", 1.5, 0.1, None, 0)
    with pytest.raises(ValueError):
        TradeoffPoint("x", 0.0, 1, "a", 0.5, -0.1, None, 0)


# --- matched utility -----------------------------------------------------


def pts(defense, rows, adversary="a", round_=1):
    return [TradeoffPoint(defense, p, round_, adversary, a, l, None, s) for p, l, a, s in rows]


def test_median_curve_takes_per_parameter_medians():
    data = pts("d", [(0.1, 1.0, 0.2, 0), (0.1, 2.0, 0.4, 1), (0.1, 9.0, 0.9, 2), (0.2, 3.0, 0.1, 0)])
    c = median_curve(data, "d")
    assert np.array_equal(c.params, [0.1, 0.2])
    assert np.allclose(c.loss, [2.0, 3.0]) and np.allclose(c.asr, [0.4, 0.1])


def test_interpolation_matches_hand_computation():
    a = Curve(np.array([1, 2, 3.0]), np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.5, 0.0]))
    b = Curve(np.array([1, 2.0]), np.array([0.5, 3.0]), np.array([0.6, 0.6]))
    grid = matched_grid(a, b, n=4)
    assert np.allclose(grid, [0.5, 1.0, 1.5, 2.0])
    c = compare(a, b, n=4)
    assert np.allclose(c.asr_a, [0.75, 0.5, 0.25, 0.0])
    assert np.allclose(c.asr_b, 0.6)
    assert c.fraction_not_worse() == 0.75
    assert c.max_excess() == pytest.approx(0.15)


def test_disjoint_curves_have_no_grid():
    a = Curve(np.array([1.0]), np.array([0.0]), np.array([0.5]))
    b = Curve(np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.array([0.5, 0.4]))
    assert matched_grid(a, b).size == 0
    assert np.isnan(compare(a, b).fraction_not_worse())


def test_compare_defenses_pools_rounds():
    data = pts("x", [(1, 0.0, 0.1, 0), (2, 1.0, 0.1, 0)]) + pts("y", [(1, 0.0, 0.5, 0), (2, 1.0, 0.5, 0)])
    data += pts("x", [(1, 0.0, 0.9, 0), (2, 1.0, 0.9, 0)], round_=2) + pts("y", [(1, 0.0, 0.5, 0), (2, 1.0, 0.5, 0)], round_=2)
    c = compare_defenses(data, "x", "y", "a", n=5)
    assert c.n == 10 and c.fraction_not_worse() == 0.5


# --- plots ---------------------------------------------------------------


def test_single_point_plot_has_one_marker(tmp_path):
    path = emit_plot(pts("d", [(0.1, 0.5, 0.3, 0)]), tmp_path / "p.svg")
    text = path.read_text()
    assert text.count("<circle") == 1
    assert 'version="1.1"' in text


def test_plot_has_one_marker_per_parameter_and_is_deterministic():
    data = pts("d", [(p, 0.5 + p, 0.3, s) for p in (0.1, 0.2, 0.3) for s in (0, 1)]) + pts("e", [(1.0, 0.4, 0.2, 0)])
    a, b = render_svg(data, Axes(title="t")), render_svg(list(data), Axes(title="t"))
    assert a == b
    curves = re.findall(r'<g class="curve" data-defense="(\w+)">(.*?)</g>', a, re.S)
    assert [(name, body.count("<circle")) for name, body in curves] == [("d", 3), ("e", 1)]


def test_empty_plot_is_an_error(tmp_path):
    with pytest.raises(ConfigError):
        emit_plot([], tmp_path / "p.svg")


# --- command line --------------------------------------------------------


def write_config(tmp_path, extra=""):
    text = bundled_config("minimal.toml").read_text() + extra
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "sweep" in capsys.readouterr().out


def test_missing_config_and_unknown_flag_exit_one(tmp_path):
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.toml")]) == 1
    assert cli.main(["sweep", "--config", "x.toml", "--bogus"]) == 1
    assert cli.main(["sweep"]) == 1


def test_runtime_failure_exits_two(tmp_path, monkeypatch):
    def boom(cfg, log=None):
        raise NumericError("non-finite")

    monkeypatch.setattr(ex, "run_sweep", boom)
    assert cli.main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == 2


def test_sweep_command_writes_csv_and_plots(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(out), "--seed", "3", "--timing"]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "defense,param,round,adversary,asr,loss,mse,seed"
    assert all(line.endswith(",3") for line in lines[1:])
    assert list(out.glob("sweep-*.svg")) and (out / "timing.json").exists()


def test_other_commands_write_their_outputs(tmp_path):
    cfg = write_config(
        tmp_path,
        "\n[convergence]\nparticipation = [1.0]\nrounds = 2\n"
        "\n[ablation]\nvariants = [\"one-step\"]\n"
        "\n[zoo_study]\nsizes = [2, 4]\n"
        "\n[reconstruction]\ninput_dim = 4\nhidden = [3]\niterations = 5\nimage_shape = [2, 2]\n",
    )
    out = tmp_path / "o"
    for cmd in ("train-zoo", "run-fl", "convergence", "ablate-variants", "zoo-size", "reconstruct"):
        assert cli.main([cmd, "--config", str(cfg), "--out", str(out)]) == 0, cmd
    for name in ("run_fl.csv", "convergence.csv", "ablation.csv", "zoo_size.csv", "reconstruct.csv"):
        assert (out / name).read_text().count("\n") > 1, name
    assert list(out.glob("*.zoo.json")) and list(out.glob("recon-*.pgm"))


def test_attribute_weight_study_jobs_and_labels():
    cfg = make(dataset={"attributes": [["a0", 2], ["a1", 2]]})
    points = ex.run_attribute_weight_study(cfg, ("a0", "a1"), (0.0, 1.0), epsilon=0.01)
    assert [p.defense for p in points[::2]] == ["gamma=0", "gamma=0", "gamma=1", "gamma=1"]
    assert {p.adversary for p in points} == {"stru-nn@a0", "stru-nn@a1", "random-forest@a0", "random-forest@a1"}


def test_attribute_count_study_includes_baseline_and_checks_count():
    cfg = make(dataset={"attributes": [["a0", 2], ["a1", 2]]})
    points = ex.run_attribute_count_study(cfg, (1, 2))
    assert list(dict.fromkeys(p.defense for p in points)) == ["none", "protect=1", "protect=2"]
    with pytest.raises(ConfigError):
        ex.run_attribute_count_study(cfg, (3,))


def test_linear_zoo_depth_is_accepted():
    scn = ex.build_scenario(make(zoo={"depth": 0}), 0)
    assert all(len(m.spec.layer_widths) == 1 for m in scn.zoo("a0").members)
