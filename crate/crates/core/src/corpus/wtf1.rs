use std::path::Path;

use crate::corpus::{GtInterval, VideoSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"WTF1";

/// Serialize a sample into the WTF1 binary layout (little-endian):
/// magic, u32 T, u32 D_rgb, u32 D_flow, u32 C, u8 has_gt,
/// f32 seconds_per_segment, RGB rows, flow rows, C label bytes,
/// then optionally u32 n_gt and (u32 class, f32 start, f32 end) triples.
pub fn write_feature_file(path: &Path, sample: &VideoSample) -> Result<()> {
    let t = sample.rgb.rows();
    let d_rgb = sample.rgb.cols();
    let d_flow = sample.flow.cols();
    let c = sample.label.len();
    let has_gt = !sample.gt_intervals.is_empty();

    let mut buf: Vec<u8> = Vec::with_capacity(24 + 4 * t * (d_rgb + d_flow) + c);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d_rgb as u32).to_le_bytes());
    buf.extend_from_slice(&(d_flow as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.push(has_gt as u8);
    buf.extend_from_slice(&(sample.seconds_per_segment as f32).to_le_bytes());
    for v in sample.rgb.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in sample.flow.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf.extend_from_slice(&sample.label);
    if has_gt {
        buf.extend_from_slice(&(sample.gt_intervals.len() as u32).to_le_bytes());
        for iv in &sample.gt_intervals {
            buf.extend_from_slice(&(iv.class as u32).to_le_bytes());
            buf.extend_from_slice(&(iv.start_seg as f32).to_le_bytes());
            buf.extend_from_slice(&(iv.end_seg as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn need(&self, n: usize, what: &str) -> Result<()> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: expected {} more bytes, file has {}",
                    n,
                    self.buf.len() - self.pos
                ),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.need(4, what)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.need(4, what)?;
        let v = f32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.need(1, what)?;
        let v = self.buf[self.pos];
        self.pos += 1;
        Ok(v)
    }

    fn f32_block(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        self.need(4 * n, what)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let at = self.pos + 4 * i;
            out.push(f32::from_le_bytes(self.buf[at..at + 4].try_into().unwrap()) as f64);
        }
        self.pos += 4 * n;
        Ok(out)
    }
}

/// Parse a WTF1 feature file. The sample id is the file stem.
pub fn load_feature_file(path: &Path) -> Result<VideoSample> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    cur.need(4, "magic")?;
    if &buf[0..4] != MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("bad magic {:?}", &buf[0..4.min(buf.len())]) });
    }
    cur.pos = 4;

    let t = cur.u32("T")? as usize;
    let d_rgb = cur.u32("D_rgb")? as usize;
    let d_flow = cur.u32("D_flow")? as usize;
    let c = cur.u32("C")? as usize;
    if t == 0 || d_rgb == 0 || d_flow == 0 || c == 0 {
        return Err(Error::Format {
            offset: 4,
            detail: format!("degenerate header: T={t} D_rgb={d_rgb} D_flow={d_flow} C={c}"),
        });
    }
    let has_gt = cur.u8("has_gt")? != 0;
    let seconds_per_segment = cur.f32("seconds_per_segment")? as f64;
    if !(seconds_per_segment > 0.0) {
        return Err(Error::Format {
            offset: (cur.pos - 4) as u64,
            detail: format!("seconds_per_segment must be positive, got {seconds_per_segment}"),
        });
    }

    // whole-payload length check up front so truncation reports totals
    let fixed = t * (d_rgb + d_flow) * 4 + c;
    if buf.len() < cur.pos + fixed {
        return Err(Error::Format {
            offset: cur.pos as u64,
            detail: format!(
                "truncated payload: header implies at least {} bytes, file has {}",
                cur.pos + fixed,
                buf.len()
            ),
        });
    }

    let rgb = cur.f32_block(t * d_rgb, "rgb rows")?;
    let flow = cur.f32_block(t * d_flow, "flow rows")?;
    cur.need(c, "label")?;
    let label = buf[cur.pos..cur.pos + c].to_vec();
    cur.pos += c;
    if label.iter().all(|&v| v == 0) {
        return Err(Error::Format {
            offset: (cur.pos - c) as u64,
            detail: "label has no positive entry".to_string(),
        });
    }
    if let Some(bad) = label.iter().find(|&&v| v > 1) {
        return Err(Error::Format {
            offset: (cur.pos - c) as u64,
            detail: format!("label entries must be 0/1, got {bad}"),
        });
    }

    let mut gt_intervals = Vec::new();
    if has_gt {
        let n = cur.u32("n_gt")? as usize;
        for _ in 0..n {
            let class = cur.u32("gt class")? as usize;
            let start_seg = cur.f32("gt start")? as f64;
            let end_seg = cur.f32("gt end")? as f64;
            if class >= c || label[class] != 1 {
                return Err(Error::Format {
                    offset: (cur.pos - 12) as u64,
                    detail: format!("gt class {class} not positive in label"),
                });
            }
            if !(start_seg >= 0.0 && start_seg < end_seg && end_seg <= t as f64) {
                return Err(Error::Format {
                    offset: (cur.pos - 8) as u64,
                    detail: format!("gt interval [{start_seg}, {end_seg}) out of range for T={t}"),
                });
            }
            gt_intervals.push(GtInterval { class, start_seg, end_seg });
        }
    }
    if cur.pos != buf.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }

    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(VideoSample {
        id,
        rgb: Tensor::new(vec![t, d_rgb], rgb).expect("rgb shape"),
        flow: Tensor::new(vec![t, d_flow], flow).expect("flow shape"),
        label,
        gt_intervals,
        seconds_per_segment,
    })
}
