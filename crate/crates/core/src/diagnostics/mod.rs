//! Bank geometry, hit-rate curves and representation similarity.

mod cka;
mod dump;
mod geometry;
mod hitrate;

pub use cka::{cka_heatmap, linear_cka, CkaHeatmap};
pub use dump::{decode_hidden_dump, encode_hidden_dump, read_hidden_dump, write_hidden_dump, HIDDEN_DUMP_MAGIC, HIDDEN_DUMP_VERSION};
pub use geometry::{geometry, geometry_of_rows, GeometryReport, SampleSizes};
pub use hitrate::{hit_rate_curve, HitRateCurve};

/// `key=value` lines, one per field, in a fixed order.
pub trait KeyValueReport {
    fn fields(&self) -> Vec<(&'static str, String)>;

    fn to_kv(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
