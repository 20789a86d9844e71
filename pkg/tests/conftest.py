import warnings

# numba emits a TBB-version advisory on this container; it has no bearing on
# results (the workqueue threading layer is used instead)
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")
