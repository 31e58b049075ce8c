import numpy as np, time
import editlab as el
import editlab.world as W

W.RELATION_WORDS = [("bornin", "birthin"), ("livesin", "basedin"), ("diedin", "deathin"),
                    ("worksin", "jobsin"), ("trainsin", "campsin")]


def build_world(seed=0, n_subjects=30, n_relations=5, n_objects=12, n_secondary=4, frac=0.67):
    world, corpus, _ = el.gen_fact_world(seed, n_subjects=n_subjects, n_relations=n_relations,
                                         n_objects=n_objects, n_secondary=n_secondary, edit_fraction=frac)
    rng = np.random.default_rng(seed + 99)
    reqs = []
    for i, subject in enumerate(world.edit_subjects):
        rel, alias = world.relations[i % len(world.relations)]
        old = world.base_facts[(subject, rel)]
        cands = [o for o in world.objects if o != old]
        new = cands[int(rng.integers(len(cands)))]
        r = el.EditRequest(subject=subject, prompt=f"{subject} {rel}", target_new=f"{new} {world.hop[new]}",
                           rephrases=[f"{subject} {alias}"])
        r.bind(world.vocab, 64)
        reqs.append(r)
    return world, corpus, reqs[:20]


world, corpus, reqs = build_world()
print("vocab", len(world.vocab), "requests", len(reqs), "locality probes", len(world.locality_pool), flush=True)

rng = np.random.default_rng(7)
pool = [s for s in corpus for _ in range(3)]
order = rng.permutation(len(pool))
docs = [" ".join(pool[i] for i in order[s:s + 3]) for s in range(0, len(pool), 3)]
ids = [world.vocab.encode(d) for d in docs]
city_ids = [world.vocab.index[c] for c in world.objects]


def margin_stats(mdl):
    ms = []
    for p in world.locality_pool:
        lg = el.forward_logits(mdl, p.prompt_ids).data[-1]
        vals = sorted((lg[i] for i in city_ids), reverse=True)
        ms.append(vals[0] - vals[1])
    return float(np.mean(ms)), float(np.percentile(ms, 25))


for epochs in (200, 400):
    t0 = time.time()
    base = el.TinyLM(el.LMConfig(seed=0))
    el.pretrain(base, ids, epochs, 1e-3, seed=1)
    acc = el.fact_accuracy(base, world.fact_prompt_pairs())
    mm, m25 = margin_stats(base)
    print(f"--- epochs={epochs}: acc={acc:.3f} margins mean={mm:.1f} p25={m25:.1f} ({time.time()-t0:.0f}s)", flush=True)
    if acc < 0.99:
        continue
    for method in ("kdpo", "dpo", "ft_m"):
        t = time.time()
        mdl = el.snapshot(base)
        for p in mdl.params.values():
            p.requires_grad = True
        mdl, outs = el.sequential_edit(mdl, reqs, el.EditorConfig(method=method))
        es, _, _ = el.edit_success(mdl, reqs)
        loc = el.locality(base, mdl, world.locality_pool)
        cyc = np.mean([o.cycles_used for o in outs])
        conv = np.mean([o.converged for o in outs])
        print(f"  {method:5s}: ES={es:.3f} loc={loc:.3f} cyc={cyc:.1f} conv={conv:.2f} ({time.time()-t:.0f}s)", flush=True)
