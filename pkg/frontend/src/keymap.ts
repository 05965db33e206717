// Keyboard layout: space = play/pause, arrows = step one frame,
// 1/2 = toggle contact for the first/second arm, p = open/close a phase.

export type KeyAction =
  | { kind: 'play_pause' }
  | { kind: 'step'; delta: number }
  | { kind: 'toggle_contact'; armIndex: number }
  | { kind: 'toggle_phase' };

export function actionForKey(key: string): KeyAction | null {
  switch (key) {
    case ' ':
      return { kind: 'play_pause' };
    case 'ArrowLeft':
      return { kind: 'step', delta: -1 };
    case 'ArrowRight':
      return { kind: 'step', delta: 1 };
    case '1':
      return { kind: 'toggle_contact', armIndex: 0 };
    case '2':
      return { kind: 'toggle_contact', armIndex: 1 };
    case 'p':
    case 'P':
      return { kind: 'toggle_phase' };
    default:
      return null;
  }
}
