"""A four-job schedule with and without EASY backfilling.

Four nodes.  J1 takes two of them for 100 s, J2 wants all four and must
wait, J3 is small and short, J4 is small but asks for too much time.
Backfilling lets J3 jump ahead because it finishes before J2 could start
anyway; J4 would delay J2 and stays behind it.
"""

from schedtree.policies import FCFSPolicy
from schedtree.simcore import run_simulation
from schedtree.workload import Job

JOBS = [
    Job(1, 0, 100, 100, 2),
    Job(2, 1, 50, 50, 4),
    Job(3, 2, 40, 50, 2),
    Job(4, 3, 40, 150, 2),
]


def show(mode):
    m = run_simulation(JOBS, FCFSPolicy(), total_nodes=4, backfill=mode)
    print(f"backfill={mode}")
    for r in m.records:
        print(f"  J{r.id}: submit {r.submit:3d}  start {r.start:3d}  end {r.start + r.runtime:3d}  wait {r.wait_time}")
    print(f"  average wait {m.avg_wait:.1f} s, average slowdown {m.avg_slowdown:.2f}\n")


if __name__ == "__main__":
    show("off")
    show("easy")
