# %% [markdown]
# # Scoring replies
# Corpus BLEU-1..4, ROUGE-1/2/L (F1, best reference) and Distinct-1/2.

# %%
from xrecosa.metrics import bleu_k, distinct_k, rouge, score_corpus

cand = "it will be ready in ten minutes .".split()
refs = ["it will be ready in five minutes .".split(), "ready in ten minutes .".split()]
for k in range(1, 5):
    print(f"BLEU-{k}: {bleu_k(cand, refs, k):.4f}")
print("ROUGE vs first ref:", [round(v, 4) for v in rouge(cand, refs[0])])

# %%
print("distinct-1 of 'a a a':", distinct_k(["a a a".split()], 1))
replies = ["i am fine .".split(), "i am fine .".split(), "sure , why not ?".split()]
print(score_corpus(replies, [[r] for r in replies]).to_text())
