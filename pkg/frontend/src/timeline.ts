import { Api, ApiError } from './api.js';
import { addContactInterval, addPhaseInterval, mergeSets, validateSet } from './tracks.js';
import type { AnnotationSet, RunDetail } from './types.js';
import { cloneAnnotations } from './types.js';

export type SaveResult =
  | { outcome: 'saved'; revision: number }
  | { outcome: 'conflict'; serverRevision: number | null; message: string }
  | { outcome: 'rejected'; message: string }
  | { outcome: 'busy' };

export interface ApiLike {
  getRun(runId: string): Promise<RunDetail>;
  getAnnotations(runId: string): Promise<AnnotationSet>;
  putAnnotations(runId: string, set: AnnotationSet): Promise<AnnotationSet>;
  frameUrl(runId: string, view: string, index: number): string;
}

const DEFAULT_ARMS = ['psm1', 'psm2'];

/** All client-side state of the annotator: playback position, the pending
 * (unsaved) annotation set, and the revision it is based on. Pending stays
 * interval-consistent at all times; in-progress toggles live outside it
 * until both endpoints are known. */
export class Timeline {
  runId = '';
  run: RunDetail | null = null;
  arms: string[] = [...DEFAULT_ARMS];

  currentIndex = 0;
  playing = false;
  rateFps = 10;
  selectedTrack = 0;

  pending: AnnotationSet = cloneAnnotations({ contact: {}, phases: [], annotator: '', revision: 0 });
  loadedRevision = 0;
  dirtyEdits = 0;

  private openContacts = new Map<string, number>();
  private openPhaseStart: number | null = null;
  private saving = false;

  constructor(private readonly api: ApiLike) {}

  async load(runId: string): Promise<void> {
    // fetch first, mutate after: a failed load leaves the old state intact
    const run = await this.api.getRun(runId);
    const annotations = await this.api.getAnnotations(runId);
    this.runId = runId;
    this.run = run;
    this.arms = this.deriveArms(run, annotations);
    this.currentIndex = 0;
    this.playing = false;
    this.pending = cloneAnnotations(annotations);
    this.loadedRevision = annotations.revision;
    this.dirtyEdits = 0;
    this.openContacts.clear();
    this.openPhaseStart = null;
  }

  private deriveArms(run: RunDetail, annotations: AnnotationSet): string[] {
    const latched = run.streams
      .filter((s) => s.kind === 'latched_numeric')
      .map((s) => s.stream_id);
    const fromAnnotations = Object.keys(annotations.contact);
    const arms = latched.length ? latched : fromAnnotations;
    return arms.length ? arms : [...DEFAULT_ARMS];
  }

  get packetCount(): number {
    return this.run?.packet_count ?? 0;
  }

  get currentStamp(): number | null {
    const stamps = this.run?.ref_stamps ?? [];
    return this.currentIndex < stamps.length ? stamps[this.currentIndex] : null;
  }

  frameUrl(view: string): string {
    return this.api.frameUrl(this.runId, view, this.currentIndex);
  }

  // --- playback ---------------------------------------------------------

  scrub(index: number): void {
    const last = Math.max(0, this.packetCount - 1);
    this.currentIndex = Math.min(Math.max(0, Math.floor(index)), last);
  }

  step(delta: number): void {
    this.scrub(this.currentIndex + delta);
  }

  /** One playback advance; pauses at the last frame. */
  tick(): void {
    if (!this.playing) return;
    if (this.currentIndex >= this.packetCount - 1) {
      this.playing = false;
      return;
    }
    this.currentIndex += 1;
  }

  togglePlay(): void {
    this.playing = !this.playing && this.packetCount > 1;
  }

  // --- editing ----------------------------------------------------------

  openContactStart(arm: string): number | null {
    return this.openContacts.get(arm) ?? null;
  }

  get openPhase(): number | null {
    return this.openPhaseStart;
  }

  /** First press opens an interval at the current stamp, second press closes
   * it. Closing at the opening stamp is a no-op (no empty intervals). */
  toggleContact(arm: string): 'opened' | 'closed' | 'discarded' | 'no_frame' {
    const stamp = this.currentStamp;
    if (stamp === null) return 'no_frame';
    const open = this.openContacts.get(arm);
    if (open === undefined) {
      this.openContacts.set(arm, stamp);
      return 'opened';
    }
    this.openContacts.delete(arm);
    const [start, end] = open <= stamp ? [open, stamp] : [stamp, open];
    if (start === end) return 'discarded';
    this.pending.contact[arm] = addContactInterval(this.pending.contact[arm] ?? [], {
      start,
      end,
      value: true,
    });
    this.dirtyEdits += 1;
    return 'closed';
  }

  togglePhase(label: string): 'opened' | 'closed' | 'discarded' | 'no_frame' {
    const stamp = this.currentStamp;
    if (stamp === null) return 'no_frame';
    if (this.openPhaseStart === null) {
      this.openPhaseStart = stamp;
      return 'opened';
    }
    const open = this.openPhaseStart;
    this.openPhaseStart = null;
    const [start, end] = open <= stamp ? [open, stamp] : [stamp, open];
    if (start === end) return 'discarded';
    this.pending.phases = addPhaseInterval(this.pending.phases, {
      start,
      end,
      label: label || 'phase',
    });
    this.dirtyEdits += 1;
    return 'closed';
  }

  setAnnotator(name: string): void {
    this.pending.annotator = name;
  }

  validationProblems(): string[] {
    return validateSet(this.pending);
  }

  get canSave(): boolean {
    return (
      this.run !== null && !this.saving && this.validationProblems().length === 0
    );
  }

  // --- persistence ------------------------------------------------------

  /** One in-flight save at a time. On a stale revision the pending edits are
   * kept so the caller can refreshAndMerge() and try again. */
  async save(): Promise<SaveResult> {
    if (this.saving) return { outcome: 'busy' };
    if (!this.canSave) {
      return { outcome: 'rejected', message: this.validationProblems().join('; ') };
    }
    this.saving = true;
    try {
      const stored = await this.api.putAnnotations(this.runId, {
        ...this.pending,
        revision: this.loadedRevision,
      });
      this.pending = cloneAnnotations(stored);
      this.loadedRevision = stored.revision;
      this.dirtyEdits = 0;
      return { outcome: 'saved', revision: stored.revision };
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        return { outcome: 'conflict', serverRevision: null, message: err.message };
      }
      if (err instanceof ApiError && err.status === 422) {
        return { outcome: 'rejected', message: err.message };
      }
      throw err;
    } finally {
      this.saving = false;
    }
  }

  /** Conflict recovery: fetch the server's copy and re-apply local edits on
   * top of it, adopting the server revision. */
  async refreshAndMerge(): Promise<void> {
    const server = await this.api.getAnnotations(this.runId);
    this.pending = mergeSets(server, this.pending);
    this.loadedRevision = server.revision;
  }

  /** Reload annotations from the server, dropping local edits. */
  async reloadAnnotations(): Promise<void> {
    const server = await this.api.getAnnotations(this.runId);
    this.pending = cloneAnnotations(server);
    this.loadedRevision = server.revision;
    this.dirtyEdits = 0;
    this.openContacts.clear();
    this.openPhaseStart = null;
  }

  exportJson(): string {
    return JSON.stringify(this.pending, null, 2);
  }
}

// re-exported so UI code only needs one import site
export { Api, ApiError };
