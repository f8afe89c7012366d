# %% [markdown]
# # Reading a metrics report
#
# Count metrics summarize signed and absolute differences; the report can
# also compare itself with a baseline and say what changed.

# %%
from leafcount.metrics import ReportRow, MetricsReport, count_metrics, interpret_report

truth = [4, 5, 6, 3, 5, 4]
ours = [4, 5, 6, 3, 6, 4]
base = [6, 7, 5, 4, 7, 6]

def report(pred):
    return MetricsReport([ReportRow("All", count_metrics(pred, truth), None, None)])

print(report(ours).to_table())

# %%
for line in interpret_report(report(ours), baseline=report(base)):
    print(line)
