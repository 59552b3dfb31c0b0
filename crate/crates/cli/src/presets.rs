//! Built-in configurations, selectable with `--preset`.

use anyhow::bail;

pub const PRESETS: [(&str, &str); 3] = [
    ("desk-rotation", include_str!("../presets/desk-rotation.toml")),
    ("desk-jigsaw", include_str!("../presets/desk-jigsaw.toml")),
    ("desk-simclr", include_str!("../presets/desk-simclr.toml")),
];

pub fn get(name: &str) -> anyhow::Result<&'static str> {
    match PRESETS.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => Ok(text),
        None => {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            bail!("unknown preset `{name}` (known: {})", known.join(", "))
        }
    }
}
