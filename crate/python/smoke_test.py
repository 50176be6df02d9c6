"""Build the extension, import it and exercise the main entry points."""

import json
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "-p", "ctnav-py", "--release", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    out = tempfile.mkdtemp(prefix="ctnav_py_")
    shutil.copy(os.path.join(ROOT, "target", "release", "libctnav_py.so"), os.path.join(out, "ctnav_py.so"))
    sys.path.insert(0, out)
    return out


def main():
    build()
    import ctnav_py as cn

    world = cn.World.sample("cluttered", 3)
    again = cn.World.from_json(world.to_json())
    assert again.obstacles() == world.obstacles()
    assert len(world.raycast((1.0, 1.0, 0.0))) == 72

    robot = cn.Robot.diff_drive()
    pose, hit = robot.step((1.0, 1.0, 0.0), [0.1, 0.0], cn.World.from_json(
        json.dumps({"bounds": [0.0, 0.0, 3.0, 3.0], "obstacles": []})))
    assert not hit and pose[0] > 1.0

    roadmap = cn.Roadmap(world, n_samples=120, seed=1)
    assert len(roadmap) > 0

    data = cn.Dataset.collect(robot, "cluttered", json.dumps({"trajectories": 8, "seed": 5}))
    assert len(data) == 8 and data.num_transitions() > 0

    model = cn.ControlTransformer(robot, seed=0)
    losses = model.train(data, updates=20, batch_size=8)
    assert len(losses) == 20 and all(l == l for l in losses)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model.save(path)
        loaded = cn.ControlTransformer.load(path)
        assert loaded.num_params() == model.num_params()

    value = cn.ValueNet(model, seed=0)
    value.train(data, updates=10, batch_size=8)
    ok, ret, collisions, path = model.rollout(world, robot, (1.0, 1.0, 0.0), (2.0, 2.0), value=value, horizon=30)
    assert len(path) >= 1

    print("ctnav_py", cn.__version__, "ok")


if __name__ == "__main__":
    main()
