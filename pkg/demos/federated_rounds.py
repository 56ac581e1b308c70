"""Run a bundled scenario and print what happened round by round.

    python3 demos/federated_rounds.py                      # 3 users, 10 rounds
    python3 demos/federated_rounds.py gkws_hetero --oracle-k
"""

import argparse

from fedimpress.federation import run
from fedimpress.scenario import bundled_scenarios, load_bundled


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("scenario", nargs="?", default="gkws_homogeneous", choices=bundled_scenarios())
    parser.add_argument("--oracle-k", action="store_true", help="cluster with the true number of new classes")
    parser.add_argument("--silent", action="store_true", help="users never announce new classes")
    args = parser.parse_args()

    sc = load_bundled(args.scenario)
    result = run(sc, oracle_k=args.oracle_k, silent=args.silent)
    names = result.registry.name

    print(f"{sc.name}: {sc.num_users} users, {sc.num_iterations} rounds, seed {sc.master_seed}")
    print(f"{'round':>5} {'local':>7} {'global':>7} {'overall':>8} {'|Y|':>4} {'|D0|':>6}")
    overall = dict(result.overall_accuracy())
    for (i, loc, glob), row in zip(result.round_summary(), result.rows(entity="GLOBAL")):
        print(f"{i:5d} {loc:7.4f} {glob:7.4f} {overall[i]:8.4f} {row.label_count:4d} {row.public_size:6d}")

    for rep in result.resolutions:
        print(f"\nround {rep.iteration}: k={rep.k}, minted {[names(l) for l in rep.minted]}, "
              f"reused {[names(l) for l in rep.reused]}")
        for (user, slot), lab in sorted(rep.mapping.items()):
            truth = sc.label_names[rep.slot_truth[(user, slot)]]
            print(f"  user {user} slot {slot} (really {truth}) -> {names(lab)}")
    for e in result.events:
        print("event:", e)
    print("\nfinal labels:", [names(l) for l in result.final_labels])


if __name__ == "__main__":
    main()
