//! Binary uplink format for abstracted tracks. See `docs/wire-format.md`.

use crate::error::{Error, Result};
use crate::ingest::Role;
use crate::quantfit::{segment_spans, AbstractedTrack, FittedAction, InitialState, PolyCoeffs, Signal, MAX_DEGREE};
use crate::segmentation::{Action, ActionKind, Channel};

pub const MAGIC: [u8; 4] = *b"SCB1";
pub const VERSION: u8 = 1;

fn kind_code(kind: ActionKind) -> u8 {
    ActionKind::ALL.iter().position(|&k| k == kind).expect("kind listed") as u8
}

fn channel_code(channel: Channel) -> u8 {
    match channel {
        Channel::Longitudinal => 0,
        Channel::Lateral => 1,
    }
}

fn tag(kind: ActionKind) -> u8 {
    channel_code(kind.channel()) << 4 | kind_code(kind)
}

fn role_code(role: Role) -> u8 {
    match role {
        Role::Ego => 0,
        Role::Other => 1,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let len =
            u16::try_from(s.len()).map_err(|_| Error::MalformedPayload(format!("string of {} bytes", s.len())))?;
        self.u16(len);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

fn count_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::MalformedPayload(format!("{n} {what} exceed the u16 count field")))
}

/// Serialize `tracks`. Diagnostics are not transmitted.
pub fn encode(tracks: &[AbstractedTrack], recording_id: &str) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::with_capacity(64 + tracks.len() * 512));
    w.0.extend_from_slice(&MAGIC);
    w.u8(VERSION);
    w.str(recording_id)?;
    w.u16(count_u16(tracks.len(), "tracks")?);
    for t in tracks {
        w.str(&t.vehicle_id)?;
        w.u8(role_code(t.role));
        w.f64(t.initial_state.s);
        w.f64(t.initial_state.t);
        w.i32(t.initial_state.lane);
        w.u16(count_u16(t.fitted.len(), "actions")?);
        for f in &t.fitted {
            let a = &f.action;
            w.u8(tag(a.kind));
            w.f64(a.t_start);
            w.f64(a.duration);
            w.i32(a.lane_before);
            w.i32(a.lane_after);
            if a.kind.is_lane_change() {
                w.f64(a.crossing_time.unwrap_or(f64::NAN));
            }
            if f.segments.is_empty() || f.segments.len() > u8::MAX as usize {
                return Err(Error::MalformedPayload(format!("{} segments", f.segments.len())));
            }
            w.u8(f.segments.len() as u8);
            for seg in &f.segments {
                if seg.a.is_empty() || seg.a.len() > MAX_DEGREE + 1 {
                    return Err(Error::MalformedPayload(format!("{} coefficients", seg.a.len())));
                }
                w.u8(seg.a.len() as u8);
                for &c in &seg.a {
                    w.f64(c);
                }
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated { offset: self.pos, missing: n - avail });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::MalformedPayload("string is not UTF-8".into()))
    }
}

fn kind_from_tag(t: u8) -> Result<ActionKind> {
    let kind = *ActionKind::ALL
        .get((t & 0x0f) as usize)
        .ok_or_else(|| Error::MalformedPayload(format!("unknown action tag {t:#04x}")))?;
    if t >> 4 != channel_code(kind.channel()) {
        return Err(Error::MalformedPayload(format!("action tag {t:#04x} names the wrong channel")));
    }
    Ok(kind)
}

fn read_track(r: &mut Reader<'_>) -> Result<AbstractedTrack> {
    let vehicle_id = r.str()?;
    let role = match r.u8()? {
        0 => Role::Ego,
        1 => Role::Other,
        other => return Err(Error::MalformedPayload(format!("unknown role code {other}"))),
    };
    let initial_state = InitialState { s: r.f64()?, t: r.f64()?, lane: r.i32()? };
    let n = r.u16()? as usize;
    let mut fitted = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = kind_from_tag(r.u8()?)?;
        let t_start = r.f64()?;
        let duration = r.f64()?;
        let lane_before = r.i32()?;
        let lane_after = r.i32()?;
        let crossing_time = if kind.is_lane_change() { Some(r.f64()?) } else { None };
        let action =
            Action { vehicle_id: vehicle_id.clone(), kind, t_start, duration, lane_before, lane_after, crossing_time };
        let seg_count = r.u8()? as usize;
        let mut coeffs = Vec::with_capacity(seg_count);
        for _ in 0..seg_count {
            let k = r.u8()? as usize;
            if k == 0 || k > MAX_DEGREE + 1 {
                return Err(Error::MalformedPayload(format!("{k} coefficients in a segment")));
            }
            coeffs.push((0..k).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?);
        }
        fitted.push((action, coeffs));
    }
    // Segment durations are implied by the action span and crossing time.
    let fitted = fitted
        .into_iter()
        .map(|(action, coeffs)| {
            let spans = segment_spans(&action);
            if spans.len() != coeffs.len() {
                return Err(Error::MalformedPayload(format!(
                    "{:?} carries {} segment(s), expected {}",
                    action.kind,
                    coeffs.len(),
                    spans.len()
                )));
            }
            let segments = coeffs.into_iter().zip(spans).map(|(a, (_, d))| PolyCoeffs { a, duration: d }).collect();
            Ok(FittedAction { channel_signal: Signal::of(action.channel()), action, segments, diagnostics: None })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AbstractedTrack {
        timeline: crate::segmentation::ActionTimeline {
            vehicle_id: vehicle_id.clone(),
            longitudinal: vec![],
            lateral: vec![],
            span: (0.0, 0.0),
        },
        vehicle_id,
        role,
        fitted,
        initial_state,
    })
}

/// Parse a payload. Never panics; every malformed input yields an error.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<AbstractedTrack>)> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(Error::Truncated { offset: bytes.len(), missing: MAGIC.len() - bytes.len() });
        }
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic(m));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }

    // A structural error in a CRC-damaged payload is reported as the CRC error.
    let whole_crc_mismatch = |e: Error| -> Error {
        if bytes.len() >= 4 {
            let (body, tail) = bytes.split_at(bytes.len() - 4);
            let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
            let computed = crc32fast::hash(body);
            if stored != computed {
                return Error::CrcMismatch { expected: stored, found: computed };
            }
        }
        e
    };
    let parse = |r: &mut Reader<'_>| -> Result<(String, Vec<AbstractedTrack>)> {
        let recording_id = r.str()?;
        let n = r.u16()? as usize;
        let mut tracks = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            tracks.push(read_track(r)?);
        }
        Ok((recording_id, tracks))
    };
    let (recording_id, mut tracks) = match parse(&mut r) {
        Ok(v) => v,
        Err(e @ Error::Truncated { .. }) => return Err(e),
        Err(e) => return Err(whole_crc_mismatch(e)),
    };
    let body_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::CrcMismatch { expected: stored, found: computed });
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedPayload(format!("{} trailing byte(s)", bytes.len() - r.pos)));
    }
    for t in &mut tracks {
        t.timeline = AbstractedTrack::timeline_from_fits(&t.vehicle_id, &t.fitted)
            .map_err(|e| Error::MalformedPayload(format!("track `{}`: {e}", t.vehicle_id)))?;
        t.check().map_err(|e| Error::MalformedPayload(format!("track `{}`: {e}", t.vehicle_id)))?;
    }
    Ok((recording_id, tracks))
}
