//! Colour overlays of supervision masks: ANSI for terminals, static HTML for files.
//! Reasoning tokens are blue, action tokens red, everything else gray.

use std::ops::Range;

use sadkit::supervision::SupervisionMasks;

const ANSI_REASON: &str = "\x1b[34m";
const ANSI_ACTION: &str = "\x1b[31m";
const ANSI_NONE: &str = "\x1b[90m";
const ANSI_RESET: &str = "\x1b[0m";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Reason,
    Action,
    None,
}

fn class(masks: &SupervisionMasks, t: usize) -> Class {
    if masks.m_r[t] == 1 {
        Class::Reason
    } else if masks.m_a[t] == 1 {
        Class::Action
    } else {
        Class::None
    }
}

/// Split `doc` into runs of equal class. Text between tokens takes the class
/// of its neighbours when they agree and is unsupervised otherwise.
fn runs(doc: &str, offsets: &[Range<usize>], masks: &SupervisionMasks) -> Vec<(Class, Range<usize>)> {
    let mut out: Vec<(Class, Range<usize>)> = Vec::new();
    let mut push = |c: Class, r: Range<usize>| {
        if r.is_empty() {
            return;
        }
        match out.last_mut() {
            Some((lc, lr)) if *lc == c && lr.end == r.start => lr.end = r.end,
            _ => out.push((c, r)),
        }
    };
    let mut pos = 0;
    for (t, r) in offsets.iter().enumerate() {
        let c = class(masks, t);
        let prev = t.checked_sub(1).map(|p| class(masks, p));
        let gap = if prev == Some(c) && !doc[pos..r.start].contains('\n') { c } else { Class::None };
        push(gap, pos..r.start);
        push(c, r.clone());
        pos = r.end;
    }
    push(Class::None, pos..doc.len());
    out
}

pub fn ansi(title: &str, doc: &str, offsets: &[Range<usize>], masks: &SupervisionMasks) -> String {
    let mut s = format!("== {title}\n");
    for (c, r) in runs(doc, offsets, masks) {
        let code = match c {
            Class::Reason => ANSI_REASON,
            Class::Action => ANSI_ACTION,
            Class::None => ANSI_NONE,
        };
        s.push_str(code);
        s.push_str(&doc[r]);
        s.push_str(ANSI_RESET);
    }
    s
}

fn escape(text: &str) -> String {
    let mut s = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => s.push_str("&amp;"),
            '<' => s.push_str("&lt;"),
            '>' => s.push_str("&gt;"),
            '"' => s.push_str("&quot;"),
            _ => s.push(ch),
        }
    }
    s
}

pub fn html_block(title: &str, doc: &str, offsets: &[Range<usize>], masks: &SupervisionMasks) -> String {
    let mut s = format!("<section>\n<h2>{}</h2>\n<pre>", escape(title));
    for (c, r) in runs(doc, offsets, masks) {
        let class = match c {
            Class::Reason => "reason",
            Class::Action => "action",
            Class::None => "none",
        };
        s.push_str(&format!("<span class=\"{class}\">{}</span>", escape(&doc[r])));
    }
    s.push_str("</pre>\n</section>\n");
    s
}

pub fn html_page(blocks: &[String]) -> String {
    let mut s = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>sadkit mask overlay</title>\n<style>\n\
         body { font-family: sans-serif; margin: 2em; }\n\
         pre { white-space: pre-wrap; font-size: 14px; }\n\
         .reason { color: #1f5fd6; }\n\
         .action { color: #c62828; }\n\
         .none { color: #8a8a8a; }\n\
         </style>\n</head>\n<body>\n<p><span class=\"reason\">reasoning</span> \
         <span class=\"action\">action</span> <span class=\"none\">unsupervised</span></p>\n",
    );
    for b in blocks {
        s.push_str(b);
    }
    s.push_str("</body>\n</html>\n");
    s
}
