#![allow(dead_code)]

use fleetscen::ingest::{to_lane_tracks, LaneTrack, Role};
use fleetscen::lane_frame::RoadModel;
use fleetscen::lane_frame::Side;
use fleetscen::quantfit::{
    abstract_tracks, segment_spans, AbstractedTrack, FitOptions, FittedAction, InitialState, PolyCoeffs, Signal,
};
use fleetscen::segmentation::{exact_span, retile, Action, ActionKind, ActionTimeline, SegmentationConfig};
use fleetscen::synthgen::{generate, two_lane_road, DriveScript, InitialCondition, Primitive, ScriptedVehicle};
use rand::Rng;

pub struct Abstracted {
    pub road: RoadModel,
    pub tracks: Vec<LaneTrack>,
    pub abstracted: Vec<AbstractedTrack>,
    pub truth: Vec<ActionTimeline>,
    pub csv_bytes: usize,
}

pub fn abstract_script(script: &DriveScript) -> Abstracted {
    let (rec, truth) = generate(script).unwrap();
    let road = script.road_model().unwrap();
    let tracks = to_lane_tracks(&road, &rec).unwrap();
    let abstracted = abstract_tracks(&tracks, &SegmentationConfig::default(), &FitOptions::default()).unwrap();
    let csv_bytes = rec.to_csv_string().unwrap().len();
    Abstracted { road, tracks, abstracted, truth, csv_bytes }
}

fn random_f64<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..4) {
        // arbitrary finite bit patterns
        0 => loop {
            let v = f64::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        },
        1 => 0.0,
        _ => rng.random_range(-1e3..1e3),
    }
}

fn boundaries<R: Rng>(rng: &mut R, t0: f64, t1: f64, inner: usize) -> Vec<f64> {
    let mut cuts: Vec<f64> = (0..inner).map(|_| rng.random_range(t0..t1)).collect();
    cuts.push(t0);
    cuts.push(t1);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts
}

/// A structurally valid abstracted track with random content and no diagnostics.
pub fn random_abstracted_track<R: Rng>(rng: &mut R) -> AbstractedTrack {
    let id_len = rng.random_range(0..12);
    let vehicle_id: String =
        (0..id_len).map(|_| if rng.random_bool(0.1) { 'é' } else { rng.random_range(b'a'..=b'z') as char }).collect();
    let role = if rng.random_bool(0.3) { Role::Ego } else { Role::Other };
    let t0 = rng.random_range(0.0..100.0);
    let t1 = t0 + rng.random_range(1.0..120.0);

    let long_kinds = [ActionKind::KeepVelocity, ActionKind::Accelerate, ActionKind::Decelerate, ActionKind::Standstill];
    let lat_kinds = [ActionKind::KeepLane, ActionKind::LaneChangeLeft, ActionKind::LaneChangeRight];
    let make = |kinds: &[ActionKind], rng: &mut R| -> Vec<Action> {
        let inner = rng.random_range(0..8);
        let cuts = boundaries(rng, t0, t1, inner);
        cuts.windows(2)
            .map(|w| {
                let kind = kinds[rng.random_range(0..kinds.len())];
                let lane_before = rng.random_range(-3..6);
                let (lane_after, crossing_time) = if kind.is_lane_change() {
                    (
                        lane_before + if kind == ActionKind::LaneChangeLeft { 1 } else { -1 },
                        Some(w[0] + rng.random_range(0.1..0.9) * (w[1] - w[0])),
                    )
                } else {
                    (lane_before, None)
                };
                Action {
                    vehicle_id: vehicle_id.clone(),
                    kind,
                    t_start: w[0],
                    duration: exact_span(w[0], w[1]),
                    lane_before,
                    lane_after,
                    crossing_time,
                }
            })
            .collect()
    };
    let longitudinal = make(&long_kinds, rng);
    let lateral = make(&lat_kinds, rng);
    let mut timeline = ActionTimeline { vehicle_id: vehicle_id.clone(), longitudinal, lateral, span: (t0, t1) };
    retile(&mut timeline).unwrap();
    timeline.check_tiling().unwrap();
    let fitted = timeline
        .longitudinal
        .iter()
        .chain(&timeline.lateral)
        .map(|a| FittedAction {
            action: a.clone(),
            channel_signal: Signal::of(a.channel()),
            segments: segment_spans(a)
                .into_iter()
                .map(|(_, d)| {
                    let n = rng.random_range(1..=6);
                    PolyCoeffs { a: (0..n).map(|_| random_f64(rng)).collect(), duration: d }
                })
                .collect(),
            diagnostics: None,
        })
        .collect();
    AbstractedTrack {
        vehicle_id,
        role,
        timeline,
        fitted,
        initial_state: InitialState { s: random_f64(rng), t: random_f64(rng), lane: rng.random_range(-3..6) },
    }
}

/// `n` vehicles on a two-lane road, each making one lane change whose
/// duration is drawn from Normal(mean, sd) and kept within [2, 9] s.
/// Returns the script and the drawn durations in vehicle order.
pub fn lane_change_fleet(n: usize, mean: f64, sd: f64, seed: u64) -> (DriveScript, Vec<f64>) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean, sd).unwrap();
    let total = 20.0;
    let mut durations = Vec::with_capacity(n);
    let vehicles = (0..n)
        .map(|i| {
            let d = loop {
                let d: f64 = normal.sample(&mut rng);
                if (2.0..=9.0).contains(&d) {
                    break d;
                }
            };
            durations.push(d);
            let lead = rng.random_range(3.0..5.0);
            let (lane, direction) = if i % 2 == 0 { (1, Side::Left) } else { (2, Side::Right) };
            ScriptedVehicle {
                vehicle_id: format!("v{i:03}"),
                role: if i == 0 { Role::Ego } else { Role::Other },
                initial: InitialCondition { lane, s: 50.0 + 2.0 * i as f64, speed: rng.random_range(15.0..35.0) },
                primitives: vec![
                    Primitive::HoldSpeed { duration: lead },
                    Primitive::ChangeLane { direction, duration: d },
                    Primitive::HoldSpeed { duration: total - lead - d },
                ],
            }
        })
        .collect();
    let script = DriveScript {
        recording_id: format!("lane-changes-{seed}"),
        road: two_lane_road(2500.0, 3.5),
        vehicles,
        sample_rate: 10.0,
        duration: total,
        noise_sigma_pos: 0.0,
        noise_sigma_speed: 0.0,
        rng_seed: seed,
    };
    (script, durations)
}

/// Single-step pattern matching any lane change of any vehicle.
pub fn any_lane_change() -> fleetscen::patterns::Pattern {
    use fleetscen::patterns::{KindPattern, Pattern, Reference, Step};
    Pattern {
        pattern_id: "lane_change".into(),
        reference: Reference::AnyVehicle,
        steps: vec![Step {
            actor: "actor".into(),
            action_kind: KindPattern::LaneChange,
            relation_predicates: vec![],
            max_gap_to_next: 0.0,
        }],
    }
}

/// Check `xml` against the flat subset schema shipped in `docs/`: element
/// names, child order and multiplicity, required and fixed attributes,
/// enumerations and numeric attribute types.
pub fn check_against_subset_schema(xml: &str) -> Result<(), String> {
    use std::collections::HashMap;
    let xsd_text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/xosc-subset.xsd"))
        .map_err(|e| e.to_string())?;
    let xsd = roxmltree::Document::parse(&xsd_text).map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(xml).map_err(|e| e.to_string())?;

    struct Attr {
        ty: String,
        required: bool,
        fixed: Option<String>,
        allowed: Vec<String>,
    }
    struct Particle {
        name: String,
        min: usize,
        max: usize,
    }
    struct Decl {
        attrs: HashMap<String, Attr>,
        choice: bool,
        children: Vec<Particle>,
    }
    let xs = |n: &roxmltree::Node, tag: &str| n.is_element() && n.tag_name().name() == tag;
    let mut decls: HashMap<String, Decl> = HashMap::new();
    for el in xsd.root_element().children().filter(|n| xs(n, "element")) {
        let mut d = Decl { attrs: HashMap::new(), choice: false, children: Vec::new() };
        for node in el.descendants() {
            if xs(&node, "attribute") {
                let allowed = node
                    .descendants()
                    .filter(|n| xs(n, "enumeration"))
                    .map(|n| n.attribute("value").unwrap().to_string())
                    .collect();
                d.attrs.insert(
                    node.attribute("name").unwrap().to_string(),
                    Attr {
                        ty: node.attribute("type").unwrap_or("xs:string").to_string(),
                        required: node.attribute("use") == Some("required"),
                        fixed: node.attribute("fixed").map(String::from),
                        allowed,
                    },
                );
            }
            if xs(&node, "choice") {
                d.choice = true;
            }
            if xs(&node, "element") && node.attribute("ref").is_some() {
                let occurs = |a: &str| match node.attribute(a) {
                    None => 1,
                    Some("unbounded") => usize::MAX,
                    Some(v) => v.parse().unwrap(),
                };
                d.children.push(Particle {
                    name: node.attribute("ref").unwrap().to_string(),
                    min: occurs("minOccurs"),
                    max: occurs("maxOccurs"),
                });
            }
        }
        decls.insert(el.attribute("name").unwrap().to_string(), d);
    }

    fn check(node: roxmltree::Node, decls: &HashMap<String, Decl>) -> Result<(), String> {
        let name = node.tag_name().name();
        let d = decls.get(name).ok_or_else(|| format!("undeclared element <{name}>"))?;
        for a in node.attributes() {
            let spec =
                d.attrs.get(a.name()).ok_or_else(|| format!("<{name}> has undeclared attribute {}", a.name()))?;
            let v = a.value();
            let ok = match spec.ty.as_str() {
                "xs:double" => v.parse::<f64>().is_ok(),
                "xs:int" => v.parse::<i32>().is_ok(),
                "xs:unsignedInt" => v.parse::<u32>().is_ok(),
                "xs:unsignedShort" => v.parse::<u16>().is_ok(),
                "xs:boolean" => v == "true" || v == "false",
                _ => true,
            };
            if !ok {
                return Err(format!("<{name}> {}={v:?} is not a {}", a.name(), spec.ty));
            }
            if spec.fixed.as_deref().is_some_and(|f| f != v)
                || (!spec.allowed.is_empty() && !spec.allowed.iter().any(|x| x == v))
            {
                return Err(format!("<{name}> {}={v:?} not allowed", a.name()));
            }
        }
        for (an, spec) in &d.attrs {
            if spec.required && node.attribute(an.as_str()).is_none() {
                return Err(format!("<{name}> lacks required attribute {an}"));
            }
        }
        if node.children().any(|c| c.is_text() && !c.text().unwrap().trim().is_empty()) {
            return Err(format!("<{name}> has text content"));
        }
        let kids: Vec<_> = node.children().filter(|c| c.is_element()).collect();
        if d.choice {
            if kids.len() != 1 || !d.children.iter().any(|p| p.name == kids[0].tag_name().name()) {
                return Err(format!("<{name}> needs exactly one of its choices"));
            }
        } else {
            let mut i = 0;
            for p in &d.children {
                let mut n = 0;
                while i < kids.len() && kids[i].tag_name().name() == p.name && n < p.max {
                    i += 1;
                    n += 1;
                }
                if n < p.min {
                    return Err(format!("<{name}> needs at least {} <{}>", p.min, p.name));
                }
            }
            if i < kids.len() {
                return Err(format!("<{name}> has unexpected child <{}>", kids[i].tag_name().name()));
            }
        }
        kids.into_iter().try_for_each(|k| check(k, decls))
    }
    if doc.root_element().tag_name().name() != "OpenSCENARIO" {
        return Err("root element is not <OpenSCENARIO>".into());
    }
    check(doc.root_element(), &decls)
}

/// One parsed polyline vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XmlVertex {
    pub time: f64,
    pub speed: f64,
    pub s: f64,
    pub t: f64,
    pub lane_id: i32,
}

/// Vertices of every trajectory event, keyed by vehicle and event name.
pub fn parse_vertices(xml: &str) -> Vec<(String, String, Vec<XmlVertex>)> {
    let doc = roxmltree::Document::parse(xml).unwrap();
    let f = |n: roxmltree::Node, a: &str| n.attribute(a).unwrap().parse::<f64>().unwrap();
    let mut out = Vec::new();
    for mg in doc.descendants().filter(|n| n.has_tag_name("ManeuverGroup")) {
        let vehicle = mg.attribute("name").unwrap().to_string();
        for ev in mg.descendants().filter(|n| n.has_tag_name("Event")) {
            let Some(poly) = ev.descendants().find(|n| n.has_tag_name("Polyline")) else { continue };
            let vertices = poly
                .children()
                .filter(|n| n.has_tag_name("Vertex"))
                .map(|v| {
                    let lp = v.descendants().find(|n| n.has_tag_name("LanePosition")).unwrap();
                    XmlVertex {
                        time: f(v, "time"),
                        speed: f(v, "speed"),
                        s: f(lp, "s"),
                        t: f(lp, "offset"),
                        lane_id: lp.attribute("laneId").unwrap().parse().unwrap(),
                    }
                })
                .collect();
            out.push((vehicle.clone(), ev.attribute("name").unwrap().to_string(), vertices));
        }
    }
    out
}

/// A random drive of `vehicles` vehicles on the straight two-lane road, each
/// alternating holds with speed changes and lane changes.
pub fn random_script<R: Rng>(
    rng: &mut R,
    vehicles: usize,
    duration: f64,
    max_manoeuvres: usize,
    noise: f64,
) -> DriveScript {
    let vehicles = (0..vehicles)
        .map(|i| {
            let mut lane = rng.random_range(1..=2);
            let mut speed: f64 = rng.random_range(15.0..32.0);
            let initial = InitialCondition { lane, s: 60.0 + 25.0 * i as f64 + rng.random_range(0.0..20.0), speed };
            let mut primitives = Vec::new();
            let mut elapsed = 0.0;
            for _ in 0..rng.random_range(0..=max_manoeuvres) {
                let hold = rng.random_range(2.0..5.0);
                let d = rng.random_range(3.0..6.5);
                if elapsed + hold + d > duration - 2.0 {
                    break;
                }
                primitives.push(Primitive::HoldSpeed { duration: hold });
                let p = match rng.random_range(0..3) {
                    0 if speed < 38.0 => {
                        speed += rng.random_range(3.0..7.0);
                        Primitive::Accelerate { to: speed, duration: d }
                    }
                    1 if speed > 14.0 => {
                        speed -= rng.random_range(3.0..7.0);
                        Primitive::Decelerate { to: speed, duration: d }
                    }
                    _ => {
                        let direction = if lane == 1 { Side::Left } else { Side::Right };
                        lane = 3 - lane;
                        Primitive::ChangeLane { direction, duration: d }
                    }
                };
                primitives.push(p);
                elapsed += hold + d;
            }
            ScriptedVehicle {
                vehicle_id: if i == 0 { "ego".into() } else { format!("v{i}") },
                role: if i == 0 { Role::Ego } else { Role::Other },
                initial,
                primitives,
            }
        })
        .collect();
    DriveScript {
        recording_id: "random".into(),
        road: two_lane_road(2500.0, 3.5),
        vehicles,
        sample_rate: 10.0,
        duration,
        noise_sigma_pos: noise,
        noise_sigma_speed: 0.0,
        rng_seed: rng.random(),
    }
}
