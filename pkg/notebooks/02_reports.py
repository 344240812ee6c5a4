# Structured reports: parsing, validation and reported tumor volume
import json

from reportseg.report import ReportError, parse_report, reported_volume_per_organ, serialize_report

text = json.dumps({
    "findings": [
        {"organ": "spleen", "diameters_mm": [10.0], "slice": 12, "attenuation": "hypo"},
        {"organ": "spleen", "diameters_mm": [20.0, 15.0, 10.0], "attenuation": "hyper"},
        {"organ": "bladder", "diameters_mm": [], "attenuation": "unknown"},
    ],
    "negative_organs": ["uterus"],
})
rep = parse_report(text)
for f in rep.findings:
    print(f.organ, f.diameters_mm, f.attenuation.value, "slice", f.slice)

# a single diameter is read as a ball, three as an ellipsoid
# the total is unknown as soon as one finding has no size
for v in reported_volume_per_organ(rep):
    total = None if v.volume_mm3 is None else round(v.volume_mm3, 1)
    print(v.organ, "reported volume", total, [(d, x if x is None else round(x, 1)) for d, x in v.per_tumor])

print("uterus negative:", rep.status("uterus") is False, "liver unlabeled:", rep.status("liver") is None)
print("round trip:", parse_report(serialize_report(rep)) == rep)

# an organ cannot be both positive and negative
bad = json.dumps({"findings": [{"organ": "uterus", "diameters_mm": [8.0]}], "negative_organs": ["uterus"]})
try:
    parse_report(bad)
except ReportError as e:
    print("rejected:", e)
