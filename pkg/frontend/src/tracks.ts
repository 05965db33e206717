// Interval-track editing. The rules here deliberately mirror the server's
// validation (start < end, intervals sorted and non-overlapping, touching
// endpoints allowed) so the client never submits a set the server would
// bounce with a 422.

import type { AnnotationSet, ContactInterval, PhaseInterval } from './types.js';

interface Spanned {
  start: number;
  end: number;
}

export function validateIntervals(name: string, intervals: Spanned[]): string[] {
  const problems: string[] = [];
  for (const iv of intervals) {
    if (!Number.isInteger(iv.start) || !Number.isInteger(iv.end)) {
      problems.push(`${name}: stamps must be integers`);
    }
    if (iv.start >= iv.end) {
      problems.push(`${name}: empty or inverted interval [${iv.start}, ${iv.end})`);
    }
  }
  const ordered = [...intervals].sort((a, b) => a.start - b.start || a.end - b.end);
  for (let i = 1; i < ordered.length; i++) {
    if (ordered[i].start < ordered[i - 1].end) {
      problems.push(
        `${name}: [${ordered[i].start}, ${ordered[i].end}) overlaps [${ordered[i - 1].start}, ${ordered[i - 1].end})`,
      );
    }
  }
  return problems;
}

export function validateSet(set: AnnotationSet): string[] {
  const problems: string[] = [];
  for (const [arm, track] of Object.entries(set.contact)) {
    problems.push(...validateIntervals(`contact/${arm}`, track));
  }
  problems.push(...validateIntervals('phases', set.phases));
  return problems;
}

function sortSpans<T extends Spanned>(spans: T[]): T[] {
  return [...spans].sort((a, b) => a.start - b.start || a.end - b.end);
}

/** Insert a contact interval, absorbing overlapping or touching intervals of
 * the same value and trimming overlaps of the opposite value (the new edit
 * wins). The result is always a valid track. */
export function addContactInterval(
  track: ContactInterval[],
  interval: ContactInterval,
): ContactInterval[] {
  if (interval.start >= interval.end) return sortSpans(track);
  const next: ContactInterval[] = [];
  let merged = { ...interval };
  for (const existing of track) {
    const disjoint = existing.end < merged.start || existing.start > merged.end;
    if (disjoint) {
      next.push(existing);
      continue;
    }
    if (existing.value === merged.value) {
      // overlapping or touching, same value: one bigger interval
      merged = {
        start: Math.min(existing.start, merged.start),
        end: Math.max(existing.end, merged.end),
        value: merged.value,
      };
      continue;
    }
    // opposite value: keep whatever sticks out on either side
    if (existing.end <= merged.start || existing.start >= merged.end) {
      next.push(existing); // only touching, nothing to trim
      continue;
    }
    if (existing.start < merged.start) {
      next.push({ start: existing.start, end: merged.start, value: existing.value });
    }
    if (existing.end > merged.end) {
      next.push({ start: merged.end, end: existing.end, value: existing.value });
    }
  }
  next.push(merged);
  return sortSpans(next);
}

/** Insert a phase interval; same-label neighbors merge, different labels are
 * trimmed so the newest edit wins. */
export function addPhaseInterval(
  phases: PhaseInterval[],
  interval: PhaseInterval,
): PhaseInterval[] {
  if (interval.start >= interval.end) return sortSpans(phases);
  const next: PhaseInterval[] = [];
  let merged = { ...interval };
  for (const existing of phases) {
    if (existing.end < merged.start || existing.start > merged.end) {
      next.push(existing);
      continue;
    }
    if (existing.label === merged.label) {
      merged = {
        start: Math.min(existing.start, merged.start),
        end: Math.max(existing.end, merged.end),
        label: merged.label,
      };
      continue;
    }
    if (existing.end <= merged.start || existing.start >= merged.end) {
      next.push(existing);
      continue;
    }
    if (existing.start < merged.start) {
      next.push({ start: existing.start, end: merged.start, label: existing.label });
    }
    if (existing.end > merged.end) {
      next.push({ start: merged.end, end: existing.end, label: existing.label });
    }
  }
  next.push(merged);
  return sortSpans(next);
}

/** Re-apply local edits on top of a fresher server copy (conflict recovery). */
export function mergeSets(server: AnnotationSet, local: AnnotationSet): AnnotationSet {
  let contact: Record<string, ContactInterval[]> = {};
  for (const [arm, track] of Object.entries(server.contact)) {
    contact[arm] = track.map((iv) => ({ ...iv }));
  }
  for (const [arm, track] of Object.entries(local.contact)) {
    for (const iv of track) {
      contact[arm] = addContactInterval(contact[arm] ?? [], iv);
    }
  }
  let phases = server.phases.map((iv) => ({ ...iv }));
  for (const iv of local.phases) {
    phases = addPhaseInterval(phases, iv);
  }
  return {
    contact,
    phases,
    annotator: local.annotator || server.annotator,
    revision: server.revision,
  };
}
