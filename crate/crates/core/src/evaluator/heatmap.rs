use std::fmt::Write;

use super::SaliencyMap;
use crate::error::{shape_err, Result};
use crate::model::AttentionState;

fn check(tokens: &[String], attention: &AttentionState, saliency: &SaliencyMap) -> Result<()> {
    let n = tokens.len();
    if attention.weights.len() != n || saliency.values.len() != n {
        return Err(shape_err(
            "heatmap",
            format!(
                "{n} tokens, {} attention weights, {} saliency values",
                attention.weights.len(),
                saliency.values.len()
            ),
        ));
    }
    Ok(())
}

/// Each value divided by the largest one (all zeros stay zero).
fn relative(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    values
        .iter()
        .map(|&v| if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Standalone HTML page with one row of tokens shaded by attention weight
/// and one shaded by saliency. Opacity is proportional to the weight, with
/// the largest weight fully opaque.
pub fn render_heatmap(tokens: &[String], attention: &AttentionState, saliency: &SaliencyMap) -> Result<String> {
    check(tokens, attention, saliency)?;
    let mut html = String::from(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>Attention heatmap</title>\n\
         <style>\nbody { font-family: sans-serif; }\n.row { margin: 0.6em 0; line-height: 2em; }\n\
         .label { display: inline-block; width: 6em; font-weight: bold; }\n\
         .tok { padding: 0.15em 0.25em; margin-right: 0.15em; border-radius: 0.2em; }\n</style>\n</head>\n<body>\n",
    );
    let rows = [
        ("attention", &attention.weights, "220, 50, 47"),
        ("saliency", &saliency.values, "38, 139, 210"),
    ];
    for (label, values, rgb) in rows {
        let _ = writeln!(html, "<div class=\"row\"><span class=\"label\">{label}</span>");
        for ((tok, &v), op) in tokens.iter().zip(values.iter()).zip(relative(values)) {
            let _ = writeln!(
                html,
                "<span class=\"tok\" style=\"background-color: rgba({rgb}, {op:.4})\" title=\"{v:.6}\">{}</span>",
                escape(tok)
            );
        }
        html.push_str("</div>\n");
    }
    html.push_str("</body>\n</html>\n");
    Ok(html)
}

/// xterm-256 cube index: white at zero, full `channel` colour at one.
fn cube(weight: f64, red: bool) -> u8 {
    let fade = 5 - (5.0 * weight).round() as u8;
    if red {
        16 + 36 * 5 + 6 * fade + fade
    } else {
        16 + 36 * fade + 6 * fade + 5
    }
}

/// Terminal rendering of [`render_heatmap`] using 256-colour backgrounds.
pub fn render_heatmap_terminal(tokens: &[String], attention: &AttentionState, saliency: &SaliencyMap) -> Result<String> {
    check(tokens, attention, saliency)?;
    let mut out = String::new();
    for (label, values, red) in [("attention", &attention.weights, true), ("saliency ", &saliency.values, false)] {
        out.push_str(label);
        out.push(' ');
        for (tok, w) in tokens.iter().zip(relative(values)) {
            let _ = write!(out, "\x1b[30;48;5;{}m {tok} \x1b[0m", cube(w, red));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(weights: Vec<f64>) -> AttentionState {
        let n = weights.len();
        AttentionState {
            scores: vec![0.0; n],
            weights,
            mask: vec![true; n],
        }
    }

    fn sal(values: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            values,
            degenerate: false,
        }
    }

    fn toks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn opacities(html: &str) -> Vec<String> {
        html.split("rgba(")
            .skip(1)
            .map(|s| s[..s.find(')').unwrap()].rsplit(", ").next().unwrap().to_string())
            .collect()
    }

    /// Minimal well-formedness check: every non-void element is closed in
    /// order and the document has the expected skeleton.
    fn well_formed(html: &str) -> bool {
        const VOID: [&str; 2] = ["meta", "br"];
        let mut stack: Vec<String> = Vec::new();
        let mut rest = html;
        while let Some(start) = rest.find('<') {
            let end = match rest[start..].find('>') {
                Some(e) => start + e,
                None => return false,
            };
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                if stack.pop().as_deref() != Some(name.trim()) {
                    return false;
                }
            } else {
                let name = tag.split_whitespace().next().unwrap_or("").to_string();
                if name.is_empty() || name.contains('"') {
                    return false;
                }
                if !VOID.contains(&name.as_str()) {
                    stack.push(name);
                }
            }
        }
        stack.is_empty() && html.starts_with("<!DOCTYPE html>")
    }

    #[test]
    fn uniform_and_one_hot_shading() {
        let html = render_heatmap(&toks(3), &state(vec![1.0 / 3.0; 3]), &sal(vec![1.0 / 3.0; 3])).unwrap();
        let ops = opacities(&html);
        assert_eq!(ops.len(), 6);
        assert!(ops.iter().all(|o| o == "1.0000"));

        let html = render_heatmap(&toks(3), &state(vec![0.0, 1.0, 0.0]), &sal(vec![0.2, 0.3, 0.5])).unwrap();
        assert_eq!(opacities(&html)[..3], ["0.0000", "1.0000", "0.0000"]);
    }

    #[test]
    fn hundred_tokens_make_well_formed_html() {
        let mut tokens = toks(100);
        tokens[3] = "<b>&\"'".into();
        let w = vec![0.01; 100];
        let html = render_heatmap(&tokens, &state(w.clone()), &sal(w)).unwrap();
        assert!(well_formed(&html));
        assert!(html.contains("&lt;b&gt;&amp;&quot;&#39;"));
        assert!(render_heatmap(&toks(2), &state(vec![1.0]), &sal(vec![1.0])).is_err());
    }

    #[test]
    fn terminal_colours() {
        assert_eq!(cube(0.0, true), 231);
        assert_eq!(cube(1.0, true), 196);
        assert_eq!(cube(1.0, false), 21);
        let out = render_heatmap_terminal(&toks(2), &state(vec![0.0, 1.0]), &sal(vec![1.0, 1.0])).unwrap();
        assert!(out.contains("48;5;231m w0 ") && out.contains("48;5;196m w1 "));
        assert_eq!(out.lines().count(), 2);
    }
}
