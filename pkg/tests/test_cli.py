import json
from pathlib import Path

import pytest

import ldeqd
from ldeqd import cli, fixtures, geometry, materials
from ldeqd.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main

EXAMPLES = Path(ldeqd.__file__).parent / "data" / "examples"

TINY = """\
schema_version = 1
seed = 3
output_dir = "run"

[geometry]
kind = "inverted-triangular-pyramid"
depth_nm = 6.0
lateral_nm = 40.0

[grid]
dims = [12, 12, 14]
spacing_nm = [5.0, 5.0, 1.0]
min_margin_nm = 4.0

[model]
kind = "single-band"
orientation = "001"

[solver]
method = "lobpcg-folded"
tol_eV = 1e-8
electron_states = 1
hole_states = 1
"""


@pytest.fixture(scope="module")
def sample_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixtures")
    fixtures.write_all(d)
    return d


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --------------------------------------------------------------------------
# configuration


def test_precedence_and_sources(tmp_path):
    cfg = write(tmp_path, TINY)
    values, sources = cli.load_config(cfg, {"seed": 11})
    assert values["seed"] == 11 and sources["seed"] == "flag"
    assert values["grid.dims"] == [12, 12, 14] and sources["grid.dims"] == "config"
    assert values["composition.dot_x"] == 0.7 and sources["composition.dot_x"] == "default"
    # relative paths resolve against the config file's directory
    assert values["output_dir"] == str(tmp_path / "run")
    values, sources = cli.load_config(cfg, {})
    assert values["seed"] == 3 and sources["seed"] == "config"
    values, sources = cli.load_config(None, {})
    assert all(s == "default" for s in sources.values())
    assert set(values) == set(sources)


@pytest.mark.parametrize(
    "edit, match",
    [
        (lambda t: t.replace("depth_nm", "dept_nm"), "unknown key 'dept_nm'"),
        (lambda t: t + "\n[physics]\nx = 1\n", "unknown key .physics."),
        (lambda t: t.replace("schema_version = 1", "schema_version = 2"), "schema_version"),
        (lambda t: t.replace('kind = "single-band"', 'kind = "kp6"'), "model.kind"),
        (lambda t: t.replace("tol_eV = 1e-8", "tol_eV = 0.0"), "tol"),
        (lambda t: t.replace("dims = [12, 12, 14]", "dims = [12, 12]"), "three"),
        (lambda t: t.replace("seed = 3", "seed = -1"), "seed"),
        (lambda t: t + "\nthreads = 0\n", "threads"),
        (lambda t: t.replace("[geometry]", '[geometry]\nsource = "heightmaps"'), "geometry.before"),
    ],
)
def test_config_errors(tmp_path, capsys, edit, match):
    cfg = write(tmp_path, edit(TINY))
    with pytest.raises(cli.ConfigError, match=match):
        cli.load_config(cfg, {})
    assert main(["simulate", str(cfg)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_missing_heightmap_fails_before_compute(tmp_path, capsys):
    text = TINY.replace("[geometry]", '[geometry]\nsource = "heightmaps"\nbefore = "h0.txt"\nafter = "hf.txt"')
    cfg = write(tmp_path, text)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_CONFIG
    assert "does not exist" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_config_given_twice(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["simulate", str(cfg), "--config", str(cfg)]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["simulate", str(tmp_path / "nope.toml")]) == EXIT_CONFIG


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG
    assert main(["--version"]) == EXIT_OK
    assert ldeqd.__version__ in capsys.readouterr().out


# --------------------------------------------------------------------------
# simulate


def test_simulate_manifest(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    out = tmp_path / "flagged"
    assert main(["simulate", str(cfg), "--out", str(out), "--threads", "1"]) == EXIT_OK
    assert "lambda=" in capsys.readouterr().out
    for name in ("grid.npz", "electron.npz", "hole.npz", "report.json", "summary.txt", "manifest.json"):
        assert (out / name).is_file()
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "complete"
    opts = man["options"]
    assert opts["output_dir"] == {"value": str(out), "source": "flag"}
    assert opts["threads"] == {"value": 1, "source": "flag"}
    assert opts["seed"] == {"value": 3, "source": "config"}
    assert opts["solver.edge_offset_meV"]["source"] == "default"
    assert set(opts) == set(cli.load_config(cfg, {})[0])
    rep = json.loads((out / "report.json").read_text())
    assert rep["transition_energy"] == pytest.approx(rep["e_energy"] - rep["h_energy"])
    assert rep["provenance"] == man["provenance"]
    assert set(rep["provenance"]) >= {"grid", "database", "solver", "config"}


def test_non_convergence_partial_manifest(tmp_path, capsys):
    cfg = write(tmp_path, TINY.replace("tol_eV = 1e-8", "tol_eV = 1e-14\nmax_iterations = 2"))
    assert main(["simulate", str(cfg)]) == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "[emission]" in err and "hint:" in err
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["status"] == "partial: failed in stage emission"
    assert "electron.npz" in man["artifacts"] and "report.json" not in man["artifacts"]


def test_geometry_stage_error(tmp_path, capsys):
    cfg = write(tmp_path, TINY.replace("dims = [12, 12, 14]", "dims = [6, 6, 14]"))
    assert main(["simulate", str(cfg)]) == EXIT_CONFIG
    assert "[geometry]" in capsys.readouterr().err
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["status"] == "partial: failed in stage geometry"
    assert man["artifacts"] == []


def test_bad_database_is_data_error(tmp_path, db):
    bad = tmp_path / "bad.ini"
    bad.write_text(materials.dumps_material_db(db).replace("me = 0.026", "me = -1"))
    cfg = write(tmp_path, TINY)
    assert main(["simulate", str(cfg), "--db", str(bad)]) == EXIT_DATA
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["status"] == "partial: failed in stage materials"


# --------------------------------------------------------------------------
# fit


@pytest.mark.parametrize(
    "what, file, key, target, tol",
    [
        ("lifetime", "trpl_152.csv", "tau_ns", 1.52, 0.05),
        ("power", "pl_alpha13.csv", "alpha", 1.3, 0.1),
        ("peak", "peak_390.csv", "fwhm_ueV", 390.0, 20.0),
        ("dolp", "dolp_006.csv", "dolp", 0.06, 0.02),
        ("g2", "hbt_141.csv", "g2_zero", 0.141, 0.03),
        ("g2", "hbt_ideal.csv", "g2_zero", 0.0, 1e-9),
    ],
)
def test_fit_bundled(tmp_path, capsys, what, file, key, target, tol):
    assert main(["fit", what, str(EXAMPLES / file), "--out", str(tmp_path)]) == EXIT_OK
    assert key in capsys.readouterr().out
    res = json.loads((tmp_path / f"fit_{what}.json").read_text())
    assert res["converged"]
    assert abs(res["parameters"][key]["value"] - target) <= tol


def test_fit_options(tmp_path):
    assert main(["fit", "peak", str(EXAMPLES / "peak_390.csv"), "--window", "1542", "1546",
                 "--model", "lorentzian", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "fit_peak.json").read_text())["model"] == "lorentzian-peak"
    assert main(["fit", "lifetime", str(EXAMPLES / "trpl_152.csv"), "--fit-start", "2.0"]) == EXIT_OK
    # a wrong period puts every peak in the wrong place
    assert main(["fit", "g2", str(EXAMPLES / "hbt_141.csv"), "--period", "40"]) == EXIT_NUMERIC


def test_fit_data_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("# kind: decay\n0,1\n0.1,x\n")
    assert main(["fit", "lifetime", str(bad)]) == EXIT_DATA
    assert "bad.csv:3" in capsys.readouterr().err
    assert main(["fit", "lifetime", str(tmp_path / "missing.csv")]) == EXIT_DATA


# --------------------------------------------------------------------------
# geometry


def test_geometry_planted_sample(sample_dir, tmp_path, capsys):
    assert main(["geometry", str(sample_dir / "sample_a.txt"), "--out", str(tmp_path)]) == EXIT_OK
    assert "24 holes" in capsys.readouterr().out
    rep = json.loads((tmp_path / "geometry.json").read_text())["map"]
    assert rep["count"] == 24
    assert rep["density_cm2"] == pytest.approx(3.84e8, rel=1e-12)
    assert rep["density_cm2"] == pytest.approx(3.84e8, abs=rep["density_err_cm2"])


def test_geometry_pair(sample_dir, tmp_path):
    a, b = str(sample_dir / "sample_a.txt"), str(sample_dir / "sample_b.txt")
    assert main(["geometry", a, b, "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "geometry.json").read_text())
    assert rep["effective_height_nm"] == pytest.approx(5.13, abs=0.1)
    assert rep["paired_effective_heights_nm"]["count"] == 24
    assert rep["paired_effective_heights_nm"]["mean"] == pytest.approx(5.13, abs=0.1)
    diff = geometry.load_heightmap(tmp_path / "difference.txt")
    assert diff.shape == (512, 512)


def test_geometry_flat(sample_dir, capsys):
    assert main(["geometry", str(sample_dir / "flat.txt")]) == EXIT_OK
    assert "0 holes" in capsys.readouterr().out


def test_geometry_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("# pitch_nm: 1\n1 2 3\n4 5\n")
    assert main(["geometry", str(bad)]) == EXIT_DATA
    assert "bad.txt:3" in capsys.readouterr().err


def test_fixture_generator_matches_bundle(tmp_path):
    fixtures.write_datasets(tmp_path)
    for name in list(fixtures.DATASETS) + ["afm_dot_h0.txt", "afm_dot_hf.txt"]:
        assert (tmp_path / name).read_bytes() == (EXAMPLES / name).read_bytes(), name


# --------------------------------------------------------------------------
# materials


def test_materials_show(capsys):
    assert main(["materials", "show"]) == EXIT_OK
    assert "InAs" in capsys.readouterr().out
    assert main(["materials", "show", "InGaAs", "--x", "0.7"]) == EXIT_OK
    out = capsys.readouterr().out
    line = next(s for s in out.splitlines() if s.split() and s.split()[0] == "eg_gamma")
    assert float(line.split()[1]) == pytest.approx(0.647, abs=5e-4)
    assert main(["materials", "show", "InGaAs"]) == EXIT_DATA


def test_materials_validate(tmp_path, db, capsys):
    assert main(["materials", "validate"]) == EXIT_OK
    assert db.digest() in capsys.readouterr().out
    bad = tmp_path / "bad.ini"
    bad.write_text(materials.dumps_material_db(db).replace("gamma1 = 20.0", "gamma1 = abc"))
    assert main(["materials", "validate", str(bad)]) == EXIT_DATA
    assert "gamma1" in capsys.readouterr().err


def test_threads_flag_applies_limit(monkeypatch):
    from threadpoolctl import threadpool_info

    seen = []

    def probe(args):
        seen.extend(p["num_threads"] for p in threadpool_info())
        return EXIT_OK

    parser = cli.build_parser

    def patched():
        p = parser()
        p.set_defaults(func=probe)
        for action in p._subparsers._group_actions:
            for sub in action.choices.values():
                sub.set_defaults(func=probe)
        return p

    monkeypatch.setattr(cli, "build_parser", patched)
    assert main(["geometry", "x.txt", "--threads", "1"]) == EXIT_OK
    assert seen and all(n == 1 for n in seen)
