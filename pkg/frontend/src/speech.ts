// Optional voice layer on top of the text UI. Everything here degrades to
// no-ops when the browser lacks the web speech interfaces, so every flow
// stays usable with keyboard and screen alone.

interface RecognitionLike {
  lang: string;
  interimResults: boolean;
  maxAlternatives: number;
  onresult: ((event: { results: { 0: { 0: { transcript: string } } } }) => void) | null;
  onerror: ((event: unknown) => void) | null;
  onend: (() => void) | null;
  start(): void;
  stop(): void;
}

interface UtteranceLike {
  lang: string;
}

interface SynthesisLike {
  speak(utterance: UtteranceLike): void;
  cancel(): void;
}

export interface SpeechHost {
  SpeechRecognition?: new () => RecognitionLike;
  webkitSpeechRecognition?: new () => RecognitionLike;
  speechSynthesis?: SynthesisLike;
  SpeechSynthesisUtterance?: new (text: string) => UtteranceLike;
}

export interface Speech {
  /** true when the browser can take dictation */
  canListen: boolean;
  /** true when the browser can read replies aloud */
  canSpeak: boolean;
  /** capture one utterance and hand the transcript to onText */
  listen(onText: (text: string) => void, onDone?: () => void): void;
  speak(text: string): void;
  stop(): void;
}

const NO_SPEECH: Speech = {
  canListen: false,
  canSpeak: false,
  listen: (_onText, onDone) => onDone?.(),
  speak: () => undefined,
  stop: () => undefined,
};

export function createSpeech(host: SpeechHost, lang = "fr-FR"): Speech {
  const Recognition = host.SpeechRecognition ?? host.webkitSpeechRecognition;
  const synthesis = host.speechSynthesis;
  const Utterance = host.SpeechSynthesisUtterance;
  if (!Recognition && !(synthesis && Utterance)) {
    return NO_SPEECH;
  }

  let active: RecognitionLike | null = null;

  return {
    canListen: Boolean(Recognition),
    canSpeak: Boolean(synthesis && Utterance),

    listen(onText, onDone) {
      if (!Recognition) {
        onDone?.();
        return;
      }
      const recognition = new Recognition();
      recognition.lang = lang;
      recognition.interimResults = false;
      recognition.maxAlternatives = 1;
      recognition.onresult = (event) => {
        const transcript = event.results[0][0].transcript;
        if (transcript) {
          onText(transcript);
        }
      };
      recognition.onerror = () => undefined;
      recognition.onend = () => {
        active = null;
        onDone?.();
      };
      active = recognition;
      recognition.start();
    },

    speak(text) {
      if (synthesis && Utterance) {
        const utterance = new Utterance(text);
        utterance.lang = lang;
        synthesis.speak(utterance);
      }
    },

    stop() {
      active?.stop();
      active = null;
      synthesis?.cancel();
    },
  };
}
