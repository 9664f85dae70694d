use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{infrared, Catalog, CatalogError, CameraTrapImage, ImageSource};

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Metadata-only mode: referenced files are not checked or opened and a
    /// missing `infrared` flag defaults to `false`.
    pub no_pixels: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image_id: String,
    camera_id: String,
    #[serde(default)]
    captured_at: Option<String>,
    file: String,
    width: u32,
    height: u32,
    source: ImageSource,
    #[serde(default)]
    infrared: Option<bool>,
}

/// Reads a line-delimited JSON manifest into a [`Catalog`].
///
/// Blank lines and lines starting with `#` are skipped. Relative `file`
/// paths resolve against the manifest's directory.
pub fn ingest_manifest(manifest_path: &Path, opts: IngestOptions) -> Result<Catalog, CatalogError> {
    let text = fs::read_to_string(manifest_path).map_err(|source| CatalogError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut seen = HashSet::new();
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |message: String| CatalogError::Malformed { line: lineno, message };
        let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| malformed(e.to_string()))?;
        if rec.image_id.is_empty() || rec.camera_id.is_empty() {
            return Err(malformed("image_id and camera_id must be non-empty".into()));
        }
        if rec.width == 0 || rec.height == 0 {
            return Err(malformed(format!("image {} has zero width or height", rec.image_id)));
        }
        let captured_at = match rec.captured_at.as_deref() {
            Some(ts) => Some(super::parse_timestamp(ts).map_err(malformed)?),
            None if rec.source.requires_timestamp() => {
                return Err(malformed(format!("image {} lacks captured_at", rec.image_id)))
            }
            None => None,
        };
        if !seen.insert(rec.image_id.clone()) {
            return Err(CatalogError::DuplicateId(rec.image_id));
        }

        let mut image = CameraTrapImage {
            image_id: rec.image_id,
            camera_id: rec.camera_id,
            captured_at,
            file_ref: rec.file,
            width_px: rec.width,
            height_px: rec.height,
            source: rec.source,
            is_infrared: rec.infrared.unwrap_or(false),
        };
        if !opts.no_pixels {
            let path = root.join(&image.file_ref);
            if !path.is_file() {
                return Err(CatalogError::MissingFile { image_id: image.image_id, path });
            }
            if rec.infrared.is_none() {
                let pixels = image::open(&path)
                    .map_err(|e| CatalogError::Pixels {
                        image_id: image.image_id.clone(),
                        message: e.to_string(),
                    })?
                    .to_rgb8();
                image.is_infrared = infrared::looks_infrared(&pixels);
            }
        }
        images.push(image);
    }
    Catalog::from_images(images, root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const META: IngestOptions = IngestOptions { no_pixels: true };

    fn rec(id: &str, cam: &str, ts: &str) -> String {
        format!(
            r#"{{"image_id":"{id}","camera_id":"{cam}","captured_at":"{ts}","file":"{id}.png","width":640,"height":480,"source":"captivity"}}"#
        )
    }

    #[test]
    fn empty_manifest_gives_empty_catalog() {
        let f = write_manifest(&[]);
        assert!(ingest_manifest(f.path(), META).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_rejected_by_name() {
        let f = write_manifest(&[
            &rec("C1_0001", "C1", "2021-06-01T10:00:00Z"),
            &rec("C1_0001", "C1", "2021-06-01T10:00:01Z"),
        ]);
        let err = ingest_manifest(f.path(), META).unwrap_err();
        assert!(matches!(&err, CatalogError::DuplicateId(id) if id == "C1_0001"), "{err}");
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let f = write_manifest(&[&rec("a", "C1", "2021-06-01T10:00:00Z"), "", "{not json"]);
        match ingest_manifest(f.path(), META).unwrap_err() {
            CatalogError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_dimension_and_missing_timestamp_rejected() {
        let f = write_manifest(&[
            r#"{"image_id":"a","camera_id":"C1","captured_at":"2021-06-01T10:00:00Z","file":"a.png","width":0,"height":4,"source":"wild"}"#,
        ]);
        assert!(matches!(ingest_manifest(f.path(), META), Err(CatalogError::Malformed { line: 1, .. })));
        let f = write_manifest(&[r#"{"image_id":"a","camera_id":"C1","file":"a.png","width":4,"height":4,"source":"wild"}"#]);
        assert!(ingest_manifest(f.path(), META).is_err());
        let f = write_manifest(&[r#"{"image_id":"a","camera_id":"inat","file":"a.png","width":4,"height":4,"source":"external"}"#]);
        assert_eq!(ingest_manifest(f.path(), META).unwrap().len(), 1);
    }

    #[test]
    fn five_record_fixture_sorted_like_oracle() {
        let recs = [
            rec("C3_0002", "C3", "2021-06-02T00:00:00Z"),
            rec("C1_0009", "C1", "2021-06-01T12:00:00Z"),
            rec("C2_0001", "C2", "2021-06-01T08:00:00Z"),
            rec("C1_0001", "C1", "2021-06-01T12:00:00Z"),
            rec("C1_0005", "C1", "2021-06-01T09:00:00Z"),
        ];
        let f = write_manifest(&recs.iter().map(String::as_str).collect::<Vec<_>>());
        let cat = ingest_manifest(f.path(), META).unwrap();
        assert_eq!(cat.len(), 5);

        // Oracle: sort (camera, timestamp string, id) tuples; ISO strings in
        // one zone sort chronologically.
        let mut oracle: Vec<(String, String, String)> = recs
            .iter()
            .map(|r| {
                let v: serde_json::Value = serde_json::from_str(r).unwrap();
                (
                    v["camera_id"].as_str().unwrap().to_owned(),
                    v["captured_at"].as_str().unwrap().to_owned(),
                    v["image_id"].as_str().unwrap().to_owned(),
                )
            })
            .collect();
        oracle.sort();
        let got: Vec<&str> = cat.images().iter().map(|i| i.image_id.as_str()).collect();
        let want: Vec<&str> = oracle.iter().map(|t| t.2.as_str()).collect();
        assert_eq!(got, want);
        assert_eq!(cat.cameras().len(), 3);
    }

    #[test]
    fn serialization_is_deterministic() {
        let f = write_manifest(&[&rec("b", "C1", "2021-06-01T10:00:01Z"), &rec("a", "C1", "2021-06-01T10:00:00Z")]);
        let one = ingest_manifest(f.path(), META).unwrap().to_ndjson();
        let two = ingest_manifest(f.path(), META).unwrap().to_ndjson();
        assert_eq!(one, two);
        assert!(one.starts_with(r#"{"image_id":"a""#));
    }

    #[test]
    fn pixel_mode_requires_files_and_derives_infrared() {
        let dir = tempfile::tempdir().unwrap();
        let gray = image::RgbImage::from_pixel(8, 8, image::Rgb([90, 91, 90]));
        gray.save(dir.path().join("ir.png")).unwrap();
        let colour = image::RgbImage::from_pixel(8, 8, image::Rgb([150, 100, 40]));
        colour.save(dir.path().join("day.png")).unwrap();
        let manifest = dir.path().join("m.ndjson");
        fs::write(
            &manifest,
            [
                r#"{"image_id":"ir","camera_id":"C1","captured_at":"2021-06-01T01:00:00Z","file":"ir.png","width":8,"height":8,"source":"captivity"}"#,
                r#"{"image_id":"day","camera_id":"C1","captured_at":"2021-06-01T13:00:00Z","file":"day.png","width":8,"height":8,"source":"captivity"}"#,
            ]
            .join("\n"),
        )
        .unwrap();
        let cat = ingest_manifest(&manifest, IngestOptions::default()).unwrap();
        assert!(cat.get("ir").unwrap().is_infrared);
        assert!(!cat.get("day").unwrap().is_infrared);

        fs::write(
            &manifest,
            r#"{"image_id":"gone","camera_id":"C1","captured_at":"2021-06-01T01:00:00Z","file":"gone.png","width":8,"height":8,"source":"captivity"}"#,
        )
        .unwrap();
        assert!(matches!(
            ingest_manifest(&manifest, IngestOptions::default()),
            Err(CatalogError::MissingFile { .. })
        ));
    }
}
