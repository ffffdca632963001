"""Budget-solver modules (cost model, offline allocation, online search, verification)."""
