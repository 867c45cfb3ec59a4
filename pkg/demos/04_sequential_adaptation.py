"""
Going to a new domain and coming back
=====================================

Only statistics change during adaptation, so adapting to a shifted domain
and then back to the original one should restore the original behaviour.
"""
from ubna import DomainDataset, Model, Offline, Segment, evaluate_model, pretrain, schedule_for
from ubna import sequential_adapt
from ubna.scenarios import affine_pair_task

task = affine_pair_task(seed=1)
model = Model.build(task.architecture, seed=task.model_seed)
pretrain(model, task.source, task.pretrain)

src_images, src_labels = task.source_eval.materialize()
tgt_images, tgt_labels = task.target_eval.materialize()


def report(tag, m):
    s = 100 * evaluate_model(m, src_images, src_labels)["miou"]
    t = 100 * evaluate_model(m, tgt_images, tgt_labels)["miou"]
    print(f"{tag:22s} source {s:6.2f}   target {t:6.2f}")


report("pre-trained", model)

sched = schedule_for("ubna+", num_steps=50)
home = DomainDataset(size=60, seed=1004, color_std=0.03)

sequential_adapt(model, [Segment(task.target, sched, Offline(6, seed=1))])
report("after target segment", model)

# the step counter restarts, so the first batches back home get full momentum
sequential_adapt(model, [Segment(home, sched, Offline(6, seed=2))])
report("after return to source", model)
