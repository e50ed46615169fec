"""Study configuration, cached stages, manifest and command line."""
import dataclasses
import json
from fractions import Fraction

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from porohomog import analysis as an
from porohomog.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from porohomog.errors import ConfigError
from porohomog.geometry import PRESET_SHAPES
from porohomog.mesh import MeshParams
from porohomog.study import Study, StudyConfig, file_hash, parse_eps


def small_dict(out, shape="ellipse", eps=("1/2", "1/4"), **extra):
    d = {
        "schema": 1,
        "name": shape,
        "shape": PRESET_SHAPES[shape].to_dict(),
        "mesh": {"n": 8, "grading": 2.0, "symmetric": shape == "circle", "levels": 0},
        "floor": False,
        "eps": list(eps),
        "output": {"dir": str(out), "svg": False},
    }
    d.update(extra)
    return d


def write_config(path, d):
    path.write_text(yaml.safe_dump(d, sort_keys=False))
    return str(path)


def run_cli(capsys, *argv):
    rc = main(["-q", *argv])
    out, err = capsys.readouterr()
    return rc, out, err


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@given(
    n=st.integers(2, 32),
    grading=st.floats(1.0, 4.0),
    levels=st.integers(0, 3),
    inv=st.sets(st.sampled_from([1, 2, 4, 8, 16, 32]), min_size=1),
    est=st.lists(st.sampled_from(an.ESTIMATE_IDS), unique=True),
    cutoff=st.tuples(st.integers(4, 8), st.integers(4, 8)),
    band=st.floats(0.5, 4.0),
    degree=st.sampled_from([2, 3]),
    shape=st.sampled_from(["circle", "ellipse"]),
)
def test_config_round_trip(n, grading, levels, inv, est, cutoff, band, degree, shape):
    cfg = StudyConfig(name=shape, shape=PRESET_SHAPES[shape], velocity_degree=degree,
                      mesh=MeshParams(n, grading, False, levels), cutoff=cutoff, eps=tuple(Fraction(1, k) for k in inv),
                      estimates=tuple(est), bl_band=band, floor=levels >= 1).validate()
    back = StudyConfig.from_dict(yaml.safe_load(cfg.dump()))
    assert back == cfg
    assert back.dump() == cfg.dump()


def test_config_file_round_trip(tmp_path):
    cfg = StudyConfig.preset("circle")
    cfg.dump(tmp_path / "c.yaml")
    assert StudyConfig.load(tmp_path / "c.yaml") == cfg


@pytest.mark.parametrize("patch", [
    {"tolerance": 1e-8},
    {"solver": {"method": "direct", "tolerence": 1e-8}},
    {"mesh": {"n": 8, "size": 3}},
    {"shape": {"kind": "circle", "radius": 0.25, "rotation": 3.0}},
])
def test_unknown_keys(tmp_path, patch):
    d = small_dict(tmp_path)
    d.update(patch)
    with pytest.raises(ConfigError, match="unknown"):
        StudyConfig.from_dict(d)


def test_schema_version(tmp_path):
    d = small_dict(tmp_path)
    del d["schema"]
    with pytest.raises(ConfigError, match="schema"):
        StudyConfig.from_dict(d)
    d["schema"] = 2
    with pytest.raises(ConfigError, match="schema"):
        StudyConfig.from_dict(d)


def test_eps_rules(tmp_path):
    with pytest.raises(ConfigError, match="power of two"):
        StudyConfig.from_dict(small_dict(tmp_path, eps=("1/2", "1/3")))
    cfg = StudyConfig.from_dict(small_dict(tmp_path, eps=("1/2", "1/3"), eps_rule="integer"))
    assert Fraction(1, 3) in cfg.eps
    for bad in (("0.3",), ("-1/2",), ("abc",), ("1/2", "1/2")):
        with pytest.raises(ConfigError):
            StudyConfig.from_dict(small_dict(tmp_path, eps=bad))
    assert parse_eps("1/8") == Fraction(1, 8) and parse_eps(0.125) == Fraction(1, 8)


def test_config_validation(tmp_path):
    for patch in ({"floor": True}, {"bl_band": 5.0}, {"cutoff": [4, 0]}, {"workers": 0},
                  {"estimates": ["Est7"]}, {"solver": {"method": "cg"}}, {"pressure_extension": "zero"},
                  {"domain": {"H": 0.5}}, {"elements": {"velocity_degree": 4}}):
        with pytest.raises(ConfigError):
            StudyConfig.from_dict(small_dict(tmp_path, **patch))
    assert StudyConfig.from_dict(small_dict(tmp_path, estimates="all")).estimates == an.ESTIMATE_IDS


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError, match="not writable"):
        Study(StudyConfig.from_dict(small_dict(blocker / "sub")))


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def test_constants_only(tmp_path):
    cfg = StudyConfig.from_dict(small_dict(tmp_path / "o", shape="circle", eps=("1", "1/2", "1/4"), estimates=[]))
    constants, fits = Study(cfg).run()
    assert fits == {}
    data = json.loads((tmp_path / "o" / "constants.json").read_text())
    assert data["K11"] == pytest.approx(0.0199014, rel=1e-2)
    assert not (tmp_path / "o" / "estimates.csv").exists()
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "complete"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A reproducible three-point run on small meshes."""
    root = tmp_path_factory.mktemp("small_run")
    d = small_dict(root / "out", eps=("1/2", "1/4", "1/8"), reproducible=True)
    cfg = StudyConfig.from_dict(d)
    Study(cfg).run()
    return root, d


def test_run_outputs(small_run):
    root, _ = small_run
    out = root / "out"
    for name in ("constants.json", "estimates.csv", "floors.csv", "estimates.json", "rates.csv", "manifest.json"):
        assert (out / name).exists(), name
    lines = (out / "estimates.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 8
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    for rel, art in manifest["artifacts"].items():
        assert art["sha256"] == file_hash(out / rel), rel
    # reproducible mode leaves no timings
    assert all("seconds" not in s for s in manifest["stages"].values())
    # values are written with 17 significant digits
    assert all(len(row.split(",")[3].replace("-", "").replace(".", "").split("e")[0]) >= 15 for row in lines[1:])


def test_stage_isolation(small_run):
    root, d = small_run
    out = root / "out"
    before = {n: (out / n).read_bytes() for n in ("estimates.csv", "rates.csv", "constants.json")}
    for n in before:
        (out / n).unlink()
    Study(StudyConfig.from_dict(d)).run()
    for n, data in before.items():
        assert (out / n).read_bytes() == data, n
    stages = json.loads((out / "manifest.json").read_text())["stages"]
    assert all(s["reused"] for k, s in stages.items() if k.split(":")[0] in ("cell", "blayer", "micro"))


def test_check_exit_codes(small_run, tmp_path, capsys):
    root, d = small_run
    cfg = write_config(tmp_path / "c.yaml", d)
    k11 = json.loads((root / "out" / "constants.json").read_text())["K11"]
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump({"constants": {"K11": {"value": k11, "rel_tol": 1e-12}},
                                    "rates": {"Est1": {"min": -10, "max": 10}}}))
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"constants": {"K11": {"value": 2 * k11, "rel_tol": 1e-3}}}))
    rc, out, _ = run_cli(capsys, "run", "--config", cfg, "--check", str(good))
    assert rc == EXIT_OK and "PASS K11" in out
    rc, out, _ = run_cli(capsys, "run", "--config", cfg, "--check", str(bad))
    assert rc == EXIT_CHECK and "FAIL K11" in out
    typo = tmp_path / "typo.yaml"
    typo.write_text(yaml.safe_dump({"constant": {}}))
    assert run_cli(capsys, "run", "--config", cfg, "--check", str(typo))[0] == EXIT_CONFIG


def test_workers_match_serial(small_run, tmp_path):
    root, d = small_run
    d2 = dict(d, reproducible=False, workers=2, output={"dir": str(tmp_path / "par"), "svg": False})
    Study(StudyConfig.from_dict(d2)).run()
    for n in ("estimates.csv", "rates.csv"):
        assert (tmp_path / "par" / n).read_bytes() == (root / "out" / n).read_bytes(), n


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def test_list_estimates(capsys):
    rc, out, _ = run_cli(capsys, "--list-estimates")
    assert rc == EXIT_OK
    lines = out.splitlines()
    assert [ln.split()[0] for ln in lines] == list(an.ESTIMATE_IDS)
    assert "eps^2" in lines[3]


def test_no_command(capsys):
    assert main([]) == EXIT_CONFIG


def test_bad_config_file(tmp_path, capsys):
    p = tmp_path / "x.yaml"
    p.write_text("schema: 1\nbogus: 3\n")
    rc, _, err = run_cli(capsys, "cell", "--config", str(p))
    assert rc == EXIT_CONFIG and "bogus" in err
    rc, _, err = run_cli(capsys, "cell", "--config", str(tmp_path / "missing.yaml"))
    assert rc == EXIT_CONFIG


def test_stage_order(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", small_dict(tmp_path / "out"))
    rc, _, err = run_cli(capsys, "blayer", "--config", cfg)
    assert rc == EXIT_CONFIG and "'cell'" in err
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "incomplete"
    rc, out, _ = run_cli(capsys, "cell", "--config", cfg)
    assert rc == EXIT_OK and "K =" in out
    rc, out, _ = run_cli(capsys, "blayer", "--config", cfg)
    assert rc == EXIT_OK and "C1bl" in out
    stages = json.loads((tmp_path / "out" / "manifest.json").read_text())["stages"]
    assert stages["cell:L0"]["reused"] and not stages["blayer:L0"]["reused"]
    rc, _, err = run_cli(capsys, "estimate", "--config", cfg)
    assert rc == EXIT_CONFIG and "'micro'" in err
    rc, _, err = run_cli(capsys, "rates", "--config", cfg)
    assert rc == EXIT_CONFIG and "'estimate'" in err


def test_micro_cache_hit(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", small_dict(tmp_path / "out"))
    rc, out, _ = run_cli(capsys, "micro", "--config", cfg, "--eps", "1/4")
    assert rc == EXIT_OK and "cache hit" not in out
    rc, out, _ = run_cli(capsys, "micro", "--config", cfg, "--eps", "1/4")
    assert rc == EXIT_OK and "(cache hit)" in out
    stages = json.loads((tmp_path / "out" / "manifest.json").read_text())["stages"]
    assert stages["micro:L0 eps=1/4"]["reused"]
    assert run_cli(capsys, "micro", "--config", cfg, "--eps", "1/3")[0] == EXIT_CONFIG


def test_rates_two_points(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", small_dict(tmp_path / "out"))
    rc, out, _ = run_cli(capsys, "run", "--config", cfg)
    assert rc == EXIT_OK
    assert (tmp_path / "out" / "estimates.json").exists() and not (tmp_path / "out" / "rates.csv").exists()
    rc, _, err = run_cli(capsys, "rates", "--config", cfg)
    assert rc == EXIT_CONFIG and ">= 3 points required" in err
    rc, out, _ = run_cli(capsys, "estimate", "--config", cfg)
    assert rc == EXIT_OK and "eps = 1/4" in out


def test_solver_failure_exit(tmp_path, capsys):
    d = small_dict(tmp_path / "out", solver={"method": "direct", "tol": 1e-30})
    cfg = write_config(tmp_path / "c.yaml", d)
    rc, _, err = run_cli(capsys, "run", "--config", cfg)
    assert rc == EXIT_SOLVER and "cell" in err
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "incomplete" and manifest["error"]["stage"] == "cell"


def test_console_script_options(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "porohomog" in capsys.readouterr().out
    cfg = dataclasses.replace(StudyConfig.preset("ellipse"), out=str(tmp_path)).validate()
    assert cfg.levels_needed == (0, 1)
