import copy
import json
import time

import numpy as np

from fusenmt.config import ExperimentConfig
from fusenmt.train import Trainer, prepare_task, pretrain_teacher_for

BASE = {
    "task": {"kind": "lexswap-reorder", "vocab_size": 2000, "len_range": [3, 9],
             "n_successors": 3, "chain_prob": 0.85, "val_pairs": 300, "test_pairs": 300},
    "model": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
              "dropout": 0.1, "max_len": 32},
    "teacher": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                "mask_prob": 0.15, "pretrain_steps": 600, "pretrain_lr": 1e-3,
                "token_budget": 2048, "dropout": 0.1},
    "training": {"steps": 1000, "token_budget": 1024, "val_interval": 10 ** 9,
                 "log_interval": 400, "drift_interval": 10 ** 9},
    "optimizer": {"warmup": 150, "lr_scale": 1.0},
}

t0 = time.time()
datas, teachers = {}, {}


def run_cell(n_pairs, name, strategies, seed):
    pay = json.loads(json.dumps(BASE))
    pay["task"]["n_pairs"] = n_pairs
    pay["seed"] = seed
    cfg = ExperimentConfig.from_dict(pay).with_strategy(strategies)
    dk = (n_pairs, seed)
    if dk not in datas:
        datas[dk] = prepare_task(cfg)
    data = datas[dk]
    teacher = None
    if cfg.needs_teacher:
        if dk not in teachers:
            teachers[dk] = pretrain_teacher_for(cfg, data)[0]
        teacher = copy.deepcopy(teachers[dk])
    tr = Trainer(cfg, data, teacher=teacher)
    tr.run(quiet=True)
    b = tr.corpus_bleu(data.test_pairs, beam=1)
    print(f"n={n_pairs} {name} seed={seed}: bleu={b:.2f} [{time.time() - t0:.0f}s]", flush=True)
    return b


for n_pairs in (1000, 5000):
    table = {}
    for name, strategies in [("baseline", set()), ("ad", {"ad"})]:
        table[name] = [run_cell(n_pairs, name, strategies, s) for s in (1, 2, 3)]
    for name, row in table.items():
        print(f"n={n_pairs} {name}: {[round(x, 2) for x in row]} mean {np.mean(row):.2f}", flush=True)
    gain = np.mean(table["ad"]) - np.mean(table["baseline"])
    print(f"n={n_pairs} AD gain: {gain:+.2f}", flush=True)

# composition check at 5k
table = {}
for name, strategies in [("ds", {"ds"}), ("sched", {"sched"}), ("all", {"ad", "ds", "sched"})]:
    table[name] = [run_cell(5000, name, strategies, s) for s in (1, 2, 3)]
for name, row in table.items():
    print(f"n=5000 {name}: {[round(x, 2) for x in row]} mean {np.mean(row):.2f}", flush=True)
