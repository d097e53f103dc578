import pytest

from cortexfit.cli import main
from cortexfit.measurement_model import read_table
from cortexfit.mesh import read_mesh
from cortexfit.phantom import read_ground_truth
from cortexfit.volume import read_volume

SMALL_PHANTOM = ["--diameter", "10", "--height", "8", "--fine-spacing", "0.1", "--noise-sd", "5"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text("scanner.slice_width = 1.0\nscanner.sigma = 0.5\ntable = model.table\nmax_iterations = 8\n")
    assert main(["make-phantom", "--preset", "medium", *SMALL_PHANTOM, "--out", str(d / "ph.vol"), "--truth", str(d / "ph.truth")]) == 0
    assert main(["make-template", "--radius", "4.5", "--height", "7", "--subdivisions", "40", "--rim-margin", "1.5",
                 "--out", str(d / "tpl.obj")]) == 0
    assert main(["build-model", "--config", str(d / "run.cfg"), "--theta-count", "7", "--out", str(d / "model.table")]) == 0
    return d


def run_cli(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_and_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("make-phantom", "make-template", "build-model", "fit", "evaluate", "info"):
        assert cmd in out
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--help"])
    assert exc.value.code == 0 and "--threads" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate"], ["info"], ["info", "x", "--bogus"], ["fit", "--config", "c"], ["build-model", "--config", "c", "--out", "o", "--threads", "0"]],
)
def test_usage_errors(argv, capsys):
    code, out, err = run_cli(argv, capsys)
    assert code == 1 and "usage:" in err and out == ""


def test_artifacts(work, capsys):
    vol = read_volume(work / "ph.vol")
    assert vol.spacing == (0.4, 0.4, 1.0)
    truth = read_ground_truth(work / "ph.truth")
    assert truth["center_radius"] == 4.5 and truth["center_height"] == 7.0 and truth["seed"] == 0.0
    mesh = read_mesh(work / "tpl.obj")
    assert mesh.n_vertices > 0
    table = read_table(work / "model.table")
    assert table.theta_axis.count == 7


def test_info(work, capsys):
    code, out, _ = run_cli(["info", work / "ph.vol"], capsys)
    assert code == 0
    assert out.startswith("dims: ") and "spacing: 0.4 0.4 1.0" in out and "origin: " in out
    code, out, _ = run_cli(["info", work / "tpl.obj"], capsys)
    assert code == 0 and "labels: VerticalCortex=" in out and "CutPedicles=" in out
    code, out, _ = run_cli(["info", work / "model.table"], capsys)
    assert code == 0 and "slice_width=1.0 sigma=0.5" in out and "theta=0.0 90.0 7" in out


def test_data_errors_name_the_culprit(work, tmp_path, capsys):
    code, _, err = run_cli(["info", tmp_path / "missing.vol"], capsys)
    assert code == 2 and "missing.vol" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("scanner.slice_width = 1.0\nscanner.sigma = 0.5\nsmoothing = 3\n")
    code, _, err = run_cli(["build-model", "--config", bad, "--out", tmp_path / "t"], capsys)
    assert code == 2 and "smoothing" in err
    code, _, err = run_cli(["make-phantom", "--wall", "0.1", "--out", tmp_path / "v", "--truth", tmp_path / "t"], capsys)
    assert code == 2 and "too coarse" in err
    assert not (tmp_path / "v").exists()


def test_fit_scanner_mismatch(work, tmp_path, capsys):
    cfg = tmp_path / "other.cfg"
    cfg.write_text(f"scanner.slice_width = 1.0\nscanner.sigma = 0.7\ntable = {work / 'model.table'}\n")
    code, _, err = run_cli(["fit", "--config", cfg, "--volume", work / "ph.vol", "--template", work / "tpl.obj",
                            "--out", tmp_path / "fit.obj"], capsys)
    assert code == 2
    assert "sigma=0.5" in err and "sigma=0.7" in err
    assert not (tmp_path / "fit.obj").exists()


def test_fit_evaluate_byte_identical(work, tmp_path, capsys):
    outputs = []
    for k, threads in enumerate((1, 1, 3)):
        out = tmp_path / f"fit{k}.obj"
        rep = tmp_path / f"fit{k}.tsv"
        code, _, err = run_cli(["fit", "--config", work / "run.cfg", "--volume", work / "ph.vol", "--template",
                                work / "tpl.obj", "--out", out, "--report", rep, "--threads", threads], capsys)
        assert code == 0, err
        outputs.append((out.read_bytes(), (tmp_path / f"fit{k}.labels").read_bytes(), rep.read_bytes()))
    assert outputs[0] == outputs[1] == outputs[2]
    assert b"# iterations" in outputs[0][2]

    ev = tmp_path / "eval.tsv"
    code, _, err = run_cli(["evaluate", "--mesh", tmp_path / "fit0.obj", "--truth", work / "ph.truth", "--out", ev], capsys)
    assert code == 0, err
    lines = ev.read_text().splitlines()
    assert lines[0].startswith("quantity\tn\tmean\tsd\tdiff")
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["radius", "height"]
    radius_diff = float(lines[1].split("\t")[4])
    assert abs(radius_diff) < 0.3

    code, out, _ = run_cli(["evaluate", "--mesh", tmp_path / "fit0.obj", "--reference", tmp_path / "fit1.obj",
                            "--samples", 500], capsys)
    assert code == 0
    row = out.splitlines()[1].split("\t")
    assert row[0] == "distance" and abs(float(row[2])) < 1e-9


def test_rerun_make_phantom_byte_identical(work, tmp_path):
    for name in ("a", "b"):
        assert main(["make-phantom", *SMALL_PHANTOM, "--out", str(tmp_path / f"{name}.vol"),
                     "--truth", str(tmp_path / f"{name}.truth")]) == 0
    assert read_volume(tmp_path / "a.vol").data.tobytes() == read_volume(tmp_path / "b.vol").data.tobytes()
    assert (tmp_path / "a.truth").read_text() == (tmp_path / "b.truth").read_text()


def test_build_model_threads_byte_identical(work, tmp_path):
    assert main(["build-model", "--config", str(work / "run.cfg"), "--theta-count", "7", "--threads", "3",
                 "--out", str(tmp_path / "m3.table")]) == 0
    assert (tmp_path / "m3.table").read_bytes() == (work / "model.table").read_bytes()


def test_inputs_unchanged(work, tmp_path):
    before = {p.name: p.read_bytes() for p in work.iterdir()}
    assert main(["fit", "--config", str(work / "run.cfg"), "--volume", str(work / "ph.vol"), "--template",
                 str(work / "tpl.obj"), "--out", str(tmp_path / "f.obj")]) == 0
    assert {p.name: p.read_bytes() for p in work.iterdir()} == before
