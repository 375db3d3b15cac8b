//! Image bytes for the annotation client.

use std::path::{Path, PathBuf};

use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use palps::dataset::ImageRecord;

use crate::ApiError;

fn content_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        "tif" | "tiff" => "image/tiff",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// A plain canvas of the image's size, for records without an image file.
pub fn placeholder_svg(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\"><rect width=\"100%\" height=\"100%\" fill=\"#808080\"/></svg>"
    )
}

/// Local files are streamed with a content type from their extension,
/// remote URLs are redirected to, and records without a URI get a blank
/// placeholder of the right size.
pub async fn serve(record: &ImageRecord, base: Option<&Path>) -> Result<Response, ApiError> {
    let Some(uri) = record.image_uri.as_deref() else {
        let svg = placeholder_svg(record.width, record.height);
        return Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/svg+xml"))], svg).into_response());
    };
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return Ok(Redirect::temporary(uri).into_response());
    }
    let raw = PathBuf::from(uri.strip_prefix("file://").unwrap_or(uri));
    let path = match base {
        Some(b) if raw.is_relative() => b.join(raw),
        _ => raw,
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok((
            [(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&path)))],
            bytes,
        )
            .into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("image file for {} not found", record.id),
        )),
        Err(e) => Err(ApiError::internal(e)),
    }
}
