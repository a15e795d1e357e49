"""Reading dependency and bracketed parses, and the bottom-up order the encoder follows."""

# %%
import numpy as np

from pif.treeio import bottom_up_order, fallback_tree, parse_conllu, parse_sexpr, random_constituency_tree, to_sexpr

sent, dep = parse_conllu("1\tcats\t2\n2\tsleep\t0\n3\tsoundly\t2\n")
print(sent.tokens, dep.heads)
print("parents before grandparents:", list(bottom_up_order(dep)))

# %%
# n-ary constituents are right-binarized and unary chains collapse.
sent, tree = parse_sexpr("(S (NP the big cat) (VP (V sat)))")
print(tree.root)
print("bottom-up:", list(bottom_up_order(tree)))

# %%
# Without a parse, a right-branching tree is used.
print(fallback_tree(["aa", "bb", "cc", "dd"]).root)

# %%
tree = random_constituency_tree(5, np.random.default_rng(1))
print(to_sexpr([f"w{i}" for i in range(5)], tree))
