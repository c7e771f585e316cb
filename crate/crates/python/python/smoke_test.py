"""Exercises the bindings end to end: geometry, OT, ICL, a short training run and matching."""

import math
import os
import tempfile

import pylinereg as lr


def main():
    line = lr.Line.from_endpoints([0.0, 0.0, 0.0], [2.0, 0.0, 0.0])
    assert line.direction == [1.0, 0.0, 0.0]
    assert line.moment == [0.0, 0.0, 0.0]

    g = lr.Pose.from_axis_angle([0.0, 0.0, 1.0], math.radians(30.0), [1.0, 2.0, 3.0])
    assert abs(g.angle_deg() - 30.0) < 1e-9
    moved = g.transform_line(line)
    assert abs(lr.line_distance(g.inverse().transform_line(moved), line)) < 1e-12

    try:
        lr.Line([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    except lr.NumericalError:
        pass
    else:
        raise AssertionError("zero direction accepted")

    plan = lr.sinkhorn([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5], [0.5, 0.5])
    assert abs(sum(plan[0]) - 0.5) < 1e-9 and plan[0][0] > plan[0][1]

    scene = lr.Scene.synthesize(seed=3, noise=False, overlap=1.0, max_rotation_deg=5.0)
    res = lr.register(scene.source, scene.target, "icl")
    assert lr.rotation_error(scene.gt_pose, res.pose) < 1e-6, res

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "src.txt")
        lr.write_lineset(path, scene.source)
        assert lr.read_lineset(path) == scene.source

        scenes = [lr.Scene.synthesize(seed=1, index=i) for i in range(6)]
        model = lr.Model("tiny", seed=0)
        log = model.train(scenes, epochs=3)
        assert [r[0] for r in log] == [1, 2, 3]
        ckpt = os.path.join(d, "model.json")
        model.save(ckpt)
        again = lr.Model.load(ckpt)
        assert again.epoch == 3

        held = lr.Scene.synthesize(seed=2)
        top = again.match_lines(held.source, held.target, top_k=10)
        assert len(top) == 10 and top[0][2] >= top[-1][2]
        reg = lr.register(held.source, held.target, "net", model=again)
        print("net registration:", reg, "rotation error",
              round(lr.rotation_error(held.gt_pose, reg.pose), 3), "deg")

    print("smoke test passed")


if __name__ == "__main__":
    main()
