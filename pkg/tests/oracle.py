"""Independent naive reference for aggregate risk analysis.

Written as the literal nested loop over programs, layers, trials, events and
ELTs using plain Python floats; shares no code with ``aaas.riskcore``.
"""


def naive_analysis(programs, trials, elt_losses, elt_terms):
    """programs: [[(elt_ids, (occR, occL, aggR, aggL)), ...], ...]
    trials: [[event_id, ...], ...]; elt_losses: [[float]*catalog]; elt_terms: [(ret, lim)]
    """
    out = {}
    for p, layers in enumerate(programs):
        for l, (elt_ids, (occ_r, occ_l, agg_r, agg_l)) in enumerate(layers):
            ylt = []
            for events in trials:
                agg = 0.0
                for e in events:
                    ev = 0.0
                    for j in elt_ids:
                        x = elt_losses[j][e] - elt_terms[j][0]
                        if x < 0.0:
                            x = 0.0
                        if x > elt_terms[j][1]:
                            x = elt_terms[j][1]
                        ev = ev + x
                    occ = ev - occ_r
                    if occ < 0.0:
                        occ = 0.0
                    if occ > occ_l:
                        occ = occ_l
                    agg = agg + occ
                y = agg - agg_r
                if y < 0.0:
                    y = 0.0
                if y > agg_l:
                    y = agg_l
                ylt.append(y)
            out[(p, l)] = ylt
    return out
