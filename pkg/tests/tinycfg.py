"""A miniature configuration that trains in well under a second per epoch."""

from meddet_kit.config import DistillConfig
from meddet_kit.detnet import NetConfig
from meddet_kit.nmode import SolverSpec
from meddet_kit.synthdata import SceneSpec


def tiny_config(**kw) -> DistillConfig:
    def net(role, w0, pc):
        return NetConfig(role, 4, tuple(w0 + 2 * k for k in range(4)), (1, 1, 1, 1), 3, pc, 1, reg_bins=4)

    teachers = {"teacher_small": net("teacher_small", 4, 6), "teacher_mid": net("teacher_mid", 5, 6),
                "teacher_large": net("teacher_large", 6, 8)}
    base = dict(teachers=teachers, student=net("student", 2, 4), solver=SolverSpec("rk4", 0.5, 1.0),
                scene=SceneSpec(image_size=32, discs_per_image=(1, 2), disc_radii=(3.0, 5.0)),
                n_train=8, n_val=4, n_test=4, batch_size=4, teacher_epochs=1, distill_epochs=1)
    base.update(kw)
    return DistillConfig(**base)
