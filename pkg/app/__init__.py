# PermuteAttack counterfactual explanation package
