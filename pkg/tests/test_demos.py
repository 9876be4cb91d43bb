import csv
import json

import numpy as np
import pytest

import difunc as d
import difunc.linop
from difunc.demos import md, mirror
from difunc.demos.cli import gradcheck_main, md_main, mirror_main


def linear_surface(slope_x, height=0.0):
    """Parameters of a 2 -> 1 net (no hidden layer) for z = slope_x * x + height."""
    return [d.tensor([[slope_x], [0.0]]), d.tensor([height])]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- reflection -------------------------------------------------------------------
def test_flat_mirror_reflects_vertical_ray_vertically():
    params = linear_surface(0.0, height=0.2)
    n = mirror.surface_normals(d.tensor([[0.3, -0.1]]), params)
    out = mirror.reflect(d.tensor([[0.0, 0.0, -1.0]]), n).numpy()
    np.testing.assert_allclose(out, [[0.0, 0.0, 1.0]], atol=1e-15)


def test_tilted_plane_turns_horizontal_ray_vertical():
    n = mirror.surface_normals(d.tensor([[0.0, 0.0]]), linear_surface(1.0))
    np.testing.assert_allclose(n.numpy(), [[-np.sqrt(0.5), 0.0, np.sqrt(0.5)]], atol=1e-15)
    out = mirror.reflect(d.tensor([[1.0, 0.0, 0.0]]), n).numpy()
    np.testing.assert_allclose(out, [[0.0, 0.0, 1.0]], atol=1e-15)


def test_reflection_preserves_norm(rng):
    dirs = rng.standard_normal((200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    normals = rng.standard_normal((200, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = mirror.reflect(d.tensor(dirs), d.tensor(normals)).numpy()
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_ray_directions_are_unit():
    dirs = mirror.ray_directions(mirror.MirrorConfig())
    assert dirs.shape == (25, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)


def test_trace_flat_mirror_hits_mirror_image():
    cfg = mirror.MirrorConfig(rays=5)
    hits, pts, valid = mirror.trace(linear_surface(0.0), mirror.ray_directions(cfg), cfg)
    assert valid.all()
    np.testing.assert_allclose(pts.numpy()[:, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(hits.numpy()[:, 2], cfg.detector_z, atol=1e-12)
    # a flat mirror at z = 0 sends rays aimed at (x, y, 0) to (2x + 1.5, 2y, -1.5)
    aim = pts.numpy()[:, :2]
    np.testing.assert_allclose(hits.numpy()[:, :2], 2.0 * aim - np.array([-1.5, 0.0]), atol=1e-12)


def test_trace_marks_rays_reflected_upward_invalid():
    cfg = mirror.MirrorConfig(rays=4)
    # steep slope: the reflected rays leave upward and never reach the detector
    _, _, valid = mirror.trace(linear_surface(-3.0), mirror.ray_directions(cfg), cfg)
    assert not valid.any()


def test_mirror_loss_mostly_non_increasing():
    losses = np.array(mirror.run(mirror.MirrorConfig()).losses)
    windows = [losses[i + 50] > losses[i] for i in range(100, len(losses) - 50)]
    assert np.mean(windows) <= 0.05


def test_mirror_short_run_is_deterministic():
    cfg = mirror.MirrorConfig(iters=5)
    assert mirror.run(cfg).losses == mirror.run(cfg).losses


# -- molecular dynamics -----------------------------------------------------------
def test_free_flight_hits_targets_exactly():
    cfg = md.MDConfig(free_flight=True, init_noise=0.0)
    x0, targets = md.make_scene(cfg)
    y1 = md.simulate(x0, d.tensor(targets - x0), cfg)
    assert md.loss_fn(y1, targets).item() <= 1e-24


def test_two_body_exchange_reflection_symmetry():
    cfg = md.MDConfig(particles=2)
    x0 = np.array([[-0.7, 0.2], [0.7, -0.2]])
    v0 = np.array([[0.3, 0.5], [-0.3, -0.5]])
    traj = md.simulate(x0, d.tensor(v0), cfg, t_eval=[0.25, 0.5, 0.75, 1.0]).numpy()
    # swapping the particles and reflecting through the origin maps the solution to itself
    np.testing.assert_allclose(traj[:, :, 0], -traj[:, :, 1], atol=1e-9)


def test_momentum_is_conserved(rng):
    cfg = md.MDConfig()
    x0, _ = md.make_scene(cfg)
    v0 = rng.standard_normal(x0.shape)
    y1 = md.simulate(x0, d.tensor(v0), cfg).numpy()
    np.testing.assert_allclose(y1[1].sum(axis=0), v0.sum(axis=0), atol=1e-6)


def test_forces_are_equal_and_opposite(rng):
    x = rng.standard_normal((6, 2))
    f = md.forces(d.tensor(x), 0.1).numpy()
    np.testing.assert_allclose(f.sum(axis=0), 0.0, atol=1e-14)
    # pair magnitude (r^2 + a)^(-1/2), attractive
    two = md.forces(d.tensor([[0.0, 0.0], [2.0, 0.0]]), 0.1).numpy()
    np.testing.assert_allclose(two, [[1.0 / np.sqrt(4.1), 0.0], [-1.0 / np.sqrt(4.1), 0.0]], rtol=1e-15)


def test_scene_pairs_targets_by_angle():
    x0, targets = md.make_scene(md.MDConfig())
    assert x0.shape == targets.shape == (8, 2)
    ang = lambda p: np.arctan2(p[:, 1], p[:, 0])
    np.testing.assert_array_equal(np.argsort(ang(x0)), np.argsort(ang(targets)))


def test_md_config_validation():
    with pytest.raises(ValueError):
        md.MDConfig(particles=1)
    with pytest.raises(ValueError):
        md.MDConfig(target="triangle")
    with pytest.raises(ValueError):
        md.MDConfig(snapshot_times=(2.0,))
    with pytest.raises(ValueError):
        md.make_scene(md.MDConfig(target_points=((0.0, 0.0),)))


def test_md_short_run_is_deterministic_and_improves():
    cfg = md.MDConfig(iters=20)
    a, b = md.run(cfg), md.run(cfg)
    assert a.losses == b.losses and a.snapshots == b.snapshots
    assert a.losses[-1] < a.losses[0]
    assert max(a.momentum_errors) <= 1e-6


# -- command line -------------------------------------------------------------------
def test_mirror_cli_writes_outputs(tmp_path, capsys):
    assert mirror_main(["--iters", "3", "--rays", "6", "--out", str(tmp_path), "-q"]) == 0
    loss = read_rows(tmp_path / "loss.csv")
    assert loss[0] == ["iteration", "loss", "skipped_rays"] and len(loss) == 5
    rays = read_rows(tmp_path / "rays.csv")
    assert rays[0][0] == "ray" and len(rays) == 7
    assert "ratio" in capsys.readouterr().out


def test_md_cli_writes_outputs(tmp_path):
    assert md_main(["--iters", "2", "--out", str(tmp_path), "-q"]) == 0
    loss = read_rows(tmp_path / "loss.csv")
    assert loss[0] == ["iteration", "loss", "momentum_error"] and len(loss) == 4
    snaps = read_rows(tmp_path / "snapshots.csv")
    assert snaps[0] == ["time", "particle", "x", "y"] and len(snaps) == 1 + 5 * 8


def test_md_cli_reads_target_file(tmp_path):
    target = tmp_path / "target.csv"
    pts = md.shape_points("circle", 4, 5.0)
    target.write_text("x,y\n" + "".join(f"{float(x)!r},{float(y)!r}\n" for x, y in pts))
    assert md_main(["--particles", "4", "--iters", "1", "--target", str(target),
                    "--out", str(tmp_path / "o"), "-q"]) == 0
    assert md_main(["--particles", "5", "--iters", "1", "--target", str(target),
                    "--out", str(tmp_path / "o"), "-q"]) == 2


@pytest.mark.parametrize("main, argv", [
    (mirror_main, ["--rays", "0"]),
    (mirror_main, ["--hidden", "16,x"]),
    (mirror_main, ["--lr", "-1"]),
    (md_main, ["--particles", "1"]),
    (md_main, ["--target", "/nonexistent/points.csv"]),
    (md_main, ["--snapshots", "0,5"]),
    (gradcheck_main, ["--suite", "bogus"]),
    (gradcheck_main, ["--eps", "0"]),
])
def test_invalid_config_exit_code(main, argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path), "-q"] if main is not gradcheck_main
                else argv + ["--out", str(tmp_path)]) == 2


def test_gradcheck_cli_single_suite(tmp_path):
    assert gradcheck_main(["--suite", "rootfinder", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] and {r["suite"] for r in report["results"]} == {"rootfinder"}
    assert all(r["order"] == 1 for r in report["results"])


def test_gradcheck_cli_second_order(tmp_path):
    assert gradcheck_main(["--suite", "minimize", "--suite", "quad", "--order", "2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert any(r["order"] == 2 for r in report["results"])


def test_gradcheck_cli_catches_tampered_vjp(tmp_path, monkeypatch):
    original = difunc.linop._solve_backward

    def flipped(*args):
        return tuple(None if g is None else -g for g in original(*args))

    monkeypatch.setattr(difunc.linop, "_solve_backward", flipped)
    assert gradcheck_main(["--suite", "solve", "--out", str(tmp_path)]) == 1
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_failed"] > 0
