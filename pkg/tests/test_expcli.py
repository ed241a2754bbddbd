import json

import pytest

from nelsonvc import expcli as ec
from nelsonvc.opcore import FOURIER_CONVENTION

SMALL = """
name = "small"
dim = 1
seed = 7
experiments = ["beta_identity", "ccr_ju88"]

[grid]
box_length = 6.283185307179586
particle_points = 16
boson_points = 32

[coefficients]
a = { kind = "sinusoid", offset = 1.0, amplitude = 0.3, wavenumber = 1.0 }
v = 0.0
m = 1.0
A = 0.5
W = 0.0

[density]
profile = "gaussian"
q = 1.0
width = 0.7853981633974483

[dressing]
sigma = 0.5

[kappa]
ladder = [1.0, 2.0]

[fock]
modes = 3
n_max = 4

[overrides.ccr_ju88.params]
samples = 3
"""


@pytest.fixture
def raw():
    return ec.ScenarioConfig.from_toml(SMALL).raw


def _cfg(raw):
    return ec.ScenarioConfig.from_dict(raw)


def _error(raw, match):
    with pytest.raises(ec.ConfigError, match=match):
        ec.validate_kappa(_cfg(raw))


def test_bundled_scenarios_validate():
    names = ec.bundled_scenarios()
    assert {"constant-1d", "variable-1d", "counterterm-3d", "massless-floor-1d"} <= set(names)
    for n in names:
        ec.validate_kappa(ec.ScenarioConfig.load(n))


def test_every_criterion_has_one_experiment():
    assert sorted(e.criterion for e in ec.EXPERIMENTS.values()) == list(range(1, 13))


@pytest.mark.parametrize("edit, match", [
    (lambda r: r["grid"].update(extra=1), r"grid\.extra: unknown key"),
    (lambda r: r.update(bogus=1), r"bogus: unknown key"),
    (lambda r: r["grid"].update(particle_points="16"), r"grid\.particle_points: expected int"),
    (lambda r: r["grid"].pop("boson_points"), r"grid\.boson_points: missing"),
    (lambda r: r.pop("density"), r"density: missing section"),
    (lambda r: r["coefficients"]["a"].update(colour=1), r"coefficients\.a\.colour: unknown key"),
    (lambda r: r["experiments"].append("nope"), r"unknown experiment 'nope'"),
    (lambda r: r["kappa"].update(ladder=[2.0, 1.0]), r"strictly increasing"),
    (lambda r: r["kappa"].update(ladder=[0.5]), r">= 1"),
    (lambda r: r["dressing"].update(sigma=0.0), r"dressing\.sigma"),
    (lambda r: r.update(dim=4), r"dim: must be"),
    (lambda r: r["overrides"]["ccr_ju88"]["params"].update(zzz=1),
     r"overrides\.ccr_ju88\.params\.zzz: unknown key"),
    (lambda r: r["overrides"].update(nope={}), r"overrides\.nope: unknown experiment"),
])
def test_config_errors_name_the_field(raw, edit, match):
    edit(raw)
    with pytest.raises(ec.ConfigError, match=match):
        ec.ScenarioConfig.from_dict(raw)


def test_bad_toml_and_missing_file(tmp_path):
    with pytest.raises(ec.ConfigError):
        ec.ScenarioConfig.from_toml("name = ")
    with pytest.raises(ec.ConfigError, match="cannot read"):
        ec.ScenarioConfig.load(tmp_path / "none.toml")


def test_field_kind_errors(raw):
    raw["coefficients"]["W"] = {"kind": "wobble"}
    with pytest.raises(ec.ConfigError, match="coefficients.W.kind"):
        _cfg(raw).coefficients()
    raw["coefficients"]["W"] = {"kind": "plateau", "height": 1.0}
    with pytest.raises(ec.ConfigError, match="coefficients.W.radius: missing"):
        _cfg(raw).coefficients()


def test_kappa_caps(raw):
    # boson cap 0.25 * 16 * L/8 = 3.14, particle cap 8 * L/8 = 6.28
    raw["kappa"]["ladder"] = [1.0, 4.0]
    _error(raw, "aliasing cap 3.142")
    raw["grid"]["boson_points"] = 128
    raw["grid"]["particle_points"] = 8
    _error(raw, "particle-grid resolution cap 3.142 used by beta_identity")
    raw["experiments"] = ["ccr_ju88"]
    ec.validate_kappa(_cfg(raw))


def test_overrides_merge(raw):
    raw["overrides"]["beta_identity"] = {"grid": {"boson_points": 64},
                                         "params": {"tol": 1e-6}}
    cfg = _cfg(raw)
    eff = cfg.effective("beta_identity")
    assert eff.raw["grid"] == {"box_length": raw["grid"]["box_length"],
                               "particle_points": 16, "boson_points": 64}
    assert "overrides" not in eff.raw
    assert cfg.params("beta_identity")["tol"] == 1e-6
    assert cfg.effective("ccr_ju88").raw["grid"]["boson_points"] == 32


def test_run_is_reproducible(raw, tmp_path):
    cfg = _cfg(raw)
    texts = []
    for i in range(2):
        run = ec.run_scenario(cfg)
        assert run.passed and run.exit_code == ec.EXIT_PASS
        paths = ec.emit_report(run, tmp_path / f"r{i}" / "nested")
        texts.append({p.name: p.read_bytes() for p in paths if p.suffix == ".csv"})
    assert texts[0] == texts[1] and texts[0]
    other = ec.run_scenario(cfg, seed=8)
    a = ec.table_csv("ccr_ju88", other.results[-1].tables["ccr_ju88"]).encode()
    assert a != texts[0]["ccr_ju88__ccr_ju88.csv"]


def test_manifest_and_csv_format(raw, tmp_path):
    run = ec.run_scenario(_cfg(raw), only="ccr_ju88")
    ec.emit_report(run, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["conventions"]["fourier"] == FOURIER_CONVENTION
    assert m["seed"] == 7 and m["passed"] is True
    assert set(m["experiments"]) == {"ccr_ju88"}
    assert m["experiments"]["ccr_ju88"]["criterion"] == 3
    body = (tmp_path / "ccr_ju88__ccr_ju88.csv").read_bytes()
    assert body.startswith(b"experiment,kappa,") and b"\r\n" in body


def test_manifest_hash_stable(raw):
    cfg = _cfg(raw)
    h = [ec.build_manifest(ec.run_scenario(cfg, only="ccr_ju88"))["manifest_hash"]
         for _ in range(2)]
    assert h[0] == h[1]


def test_check_semantics():
    assert ec.Check("x", 1.0, 1.0).passed
    assert not ec.Check("x", 1.0, 1.0, "<").passed
    assert ec.Check("x", 2.0, 1.0, ">=").passed
    assert not ec.Check("x", float("nan"), 1.0).passed
    assert not ec.Check("x", 0.0, 1.0, "true").passed
    r = ec.ExperimentResult("e", checks=[ec.Check("x", 5.0, 1.0, enforced=False)])
    assert r.passed


def test_resolvent_needs_two_rungs(raw):
    raw["experiments"] = ["resolvent_convergence"]
    raw["kappa"]["ladder"] = [1.0]
    with pytest.raises(ec.ConfigError, match="at least two rungs"):
        ec.run_scenario(_cfg(raw))


def test_unknown_only(raw):
    with pytest.raises(ec.ConfigError, match="--only"):
        ec.run_scenario(_cfg(raw), only="nope")


def test_cli_list(capsys):
    assert ec.main(["--list"]) == ec.EXIT_PASS
    out = capsys.readouterr().out
    assert "klmn_premise" in out and "constant-1d" in out


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.toml"
    good.write_text(SMALL)
    out = tmp_path / "a" / "b"
    assert ec.main(["--scenario", str(good), "--out", str(out), "--only", "ccr_ju88"]) == 0
    assert (out / "manifest.json").exists()
    # a failing check
    fail = tmp_path / "fail.toml"
    fail.write_text(SMALL + "tol_ccr = -1.0\n")
    assert ec.main(["--scenario", str(fail), "--out", str(tmp_path / "f"),
                    "--only", "ccr_ju88"]) == ec.EXIT_FAIL
    # configuration errors
    assert ec.main([]) == ec.EXIT_CONFIG
    assert ec.main(["--scenario", str(tmp_path / "missing.toml")]) == ec.EXIT_CONFIG
    assert ec.main(["--scenario", str(good), "--seed", "-1"]) == ec.EXIT_CONFIG
    assert ec.main(["--scenario", str(good), "--threads", "0"]) == ec.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "config error" in err
    # a numeric failure: the coefficient a is not elliptic
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace('a = { kind = "sinusoid", offset = 1.0, amplitude = 0.3',
                                 'a = { kind = "sinusoid", offset = 0.1, amplitude = 0.3'))
    assert ec.main(["--scenario", str(bad), "--out", str(tmp_path / "n"),
                    "--only", "beta_identity"]) == ec.EXIT_NUMERIC
    m = json.loads((tmp_path / "n" / "manifest.json").read_text())
    assert m["error"].startswith("beta_identity: EllipticityError")


def test_threads_do_not_change_results(raw):
    cfg = _cfg(raw)
    a = ec.run_scenario(cfg, only="beta_identity")
    b = ec.run_scenario(cfg, only="beta_identity", threads=2)
    ta = ec.table_csv("beta_identity", next(iter(a.results[0].tables.values())))
    tb = ec.table_csv("beta_identity", next(iter(b.results[0].tables.values())))
    assert ta == tb
