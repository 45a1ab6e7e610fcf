from vesicle.exceptions import PlottingException


def vesicle_theme():
    font_family = "Fira Sans, Helvetica"
    return {
        "config": {
            "axis": {
                "labelFont": font_family,
                "labelFontSize": 12,
                "titleFont": font_family,
                "titleFontSize": 12,
                "grid": False,
            },
            "legend": {"labelFont": font_family, "titleFont": font_family},
            "title": {"font": font_family},
            "view": {"width": 400, "height": 400, "strokeWidth": 0},
            "background": "white",
        }
    }


def plot_pr_curve(curves, title=None, width=None, height=None, path=None):
    """Plot one or more precision-recall curves.

    Parameters
    ----------
    curves : `PRCurve` or `dict`
        A single curve, or curves keyed by the name shown in the legend (e.g. the forest and
        the threshold-and-size baseline).
    path : `str`, optional
        Save the chart; the format follows the extension (.html or .json).

    Returns
    -------
    `altair.Chart`
    """
    # Deferred imports
    import altair as alt
    import pandas as pd

    from vesicle.viz import PR_PALETTE

    if not isinstance(curves, dict):
        curves = {"detections": curves}
    if not curves:
        raise PlottingException("There are no precision-recall curves to plot")

    frames = []
    for name, curve in curves.items():
        df = curve.to_dataframe()
        df["f1"] = [p.f1 for p in curve.grid_points]
        df["method"] = name
        frames.append(df)
    plot_data = pd.concat(frames, ignore_index=True)

    props = {}
    if title:
        props["title"] = title
    if width:
        props["width"] = width
    if height:
        props["height"] = height

    chart = (
        alt.Chart(plot_data)
        .mark_circle(size=40, opacity=0.7)
        .encode(
            x=alt.X("recall", axis=alt.Axis(title="Recall"), scale=alt.Scale(domain=[0, 1])),
            y=alt.Y("precision", axis=alt.Axis(title="Precision"), scale=alt.Scale(domain=[0, 1])),
            color=alt.Color(
                "method:N", legend=alt.Legend(title="Method"), scale=alt.Scale(range=PR_PALETTE)
            ),
            tooltip=["method", "threshold", "min2d", "max2d", "min3d", "persistence", "f1"],
        )
        .properties(**props)
    )
    chart = chart.configure(**vesicle_theme()["config"])

    if path is not None:
        chart.save(path)
    return chart
