"""3D scaling run: global hybrid IAS with the block-AMEn KKT inner solver.

Runs the quarter pipe at 756 and 6048 interior dofs for N_t = 50 and 100 and
prints the IAS step count and wall time per cell.

    python scripts/scaling_3d.py --out runs/scaling3d
"""

import argparse
import time

from ttias.cli import GRIDS_3D, protocol_3d, run_reconstruct


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/scaling3d")
    p.add_argument("--dofs", type=int, nargs="+", default=sorted(GRIDS_3D))
    p.add_argument("--steps", type=int, nargs="+", default=[50, 100])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print(f"{'dofs':>6} {'N_t':>4} {'IAS steps':>9} {'nonzeros':>8} {'rel. error':>10} {'seconds':>8}", flush=True)
    for n in args.dofs:
        for N_t in args.steps:
            t0 = time.perf_counter()
            man = run_reconstruct(protocol_3d(n, N_t, args.seed), f"{args.out}/n{n}_t{N_t}")
            print(f"{n:>6} {N_t:>4} {man['iterations']:>9} {man['final_nonzeros']:>8} "
                  f"{man['residual']:>10.3e} {time.perf_counter() - t0:>8.1f}", flush=True)


if __name__ == "__main__":
    main()
