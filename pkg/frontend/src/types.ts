// Wire types mirroring the server's JSON bodies. Stamps are integer
// nanoseconds throughout; run lengths keep them far below 2^53.

export interface ContactInterval {
  start: number;
  end: number;
  value: boolean;
}

export interface PhaseInterval {
  start: number;
  end: number;
  label: string;
}

export interface AnnotationSet {
  contact: Record<string, ContactInterval[]>;
  phases: PhaseInterval[];
  annotator: string;
  revision: number;
}

export interface StreamInfo {
  stream_id: string;
  kind: string;
  nominal_rate_hz: number;
  arity: number;
  view?: string | null;
}

export interface RunSummary {
  run_id: string;
  recorder_mode: string;
  packet_count: number;
  reject_count: number;
  drop_count: number;
  views: string[];
  streams: StreamInfo[];
  dirty: boolean;
}

export interface RunDetail {
  run_id: string;
  recorder_mode: string;
  created_at_ns: number;
  streams: StreamInfo[];
  packet_count: number;
  reject_count: number;
  drop_count: number;
  ref_stamps: number[];
  sync_config: Record<string, unknown>;
  schedule: Record<string, unknown> | null;
  dirty: boolean;
  warnings: string[];
}

export interface KinematicsRecord {
  stamp: number;
  values: number[];
  delta_ns: number;
}

export interface KinematicsResponse {
  run_id: string;
  stream: string;
  records: KinematicsRecord[];
}

export function emptyAnnotations(): AnnotationSet {
  return { contact: {}, phases: [], annotator: '', revision: 0 };
}

export function cloneAnnotations(set: AnnotationSet): AnnotationSet {
  return {
    contact: Object.fromEntries(
      Object.entries(set.contact).map(([arm, ivs]) => [arm, ivs.map((iv) => ({ ...iv }))]),
    ),
    phases: set.phases.map((iv) => ({ ...iv })),
    annotator: set.annotator,
    revision: set.revision,
  };
}
